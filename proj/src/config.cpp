#include "anglekit/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "anglekit/common.hpp"

namespace anglekit::config {

const std::vector<SchemaEntry>& schema() {
    static const std::vector<SchemaEntry> s = {
        // synthetic data generator
        {"synth.count", "int", "500", "number of images to generate"},
        {"synth.height", "int", "128", "image height in px"},
        {"synth.width", "int", "128", "image width in px"},
        {"synth.open_lo", "double", "35", "open-class aperture range low (degrees)"},
        {"synth.open_hi", "double", "60", "open-class aperture range high (degrees)"},
        {"synth.closed_lo", "double", "8", "closed-class aperture range low (degrees)"},
        {"synth.closed_hi", "double", "20", "closed-class aperture range high (degrees)"},
        {"synth.noise_sigma", "double", "0.03", "background noise standard deviation"},
        {"synth.closed_prior", "double", "0.5", "probability an image is closed-class"},
        {"synth.margin", "int", "14", "apex margin from image and half borders (px)"},
        // data preparation
        {"data.mirror_right", "bool", "true", "mirror right halves into left orientation"},
        {"split.ratio", "double", "0.8", "train fraction for the train/test split"},
        // classifier architecture
        {"cls.depths", "ints", "3,8,36,3", "bottleneck blocks per stage"},
        {"cls.base_width", "int", "64", "stage-1 bottleneck mid channels"},
        {"cls.scale", "double", "1.0", "width multiplier for reduced configurations"},
        {"cls.input_size", "int", "256", "classifier input resolution (divisible by 32)"},
        {"cls.tweak_b", "bool", "true", "stride on the 3x3 conv instead of the first 1x1"},
        {"cls.tweak_d", "bool", "true", "avg-pool + stride-1 conv downsampling shortcut"},
        {"cls.zero_init_residual", "bool", "true", "zero the last norm scale of each block"},
        // localizer architecture
        {"loc.encoder", "string", "default4", "encoder variant: default4 | scaled_mbconv"},
        {"loc.widths", "ints", "32,64,128,256,512", "encoder widths at strides 2,4,8,16,32"},
        {"loc.depth_mult", "double", "1.0", "scaled_mbconv block-count multiplier"},
        {"loc.width_mult", "double", "1.0", "scaled_mbconv width multiplier"},
        {"loc.base_depths", "ints", "1,2,2,3", "scaled_mbconv base block counts per stage"},
        {"loc.ppm", "bool", "true", "enable the pyramid pooling module"},
        {"loc.ppm_bins", "ints", "1,2,3,6", "pyramid pooling bin sizes"},
        {"loc.decoder_width", "int", "64", "decoder channel width"},
        {"loc.skip_mode", "string", "add", "skip fusion: add | concat"},
        {"loc.head_bias", "double", "0.0", "initial bias of the heatmap head"},
        {"loc.resize", "int", "499", "stage-1 resize size before padding"},
        {"loc.pad", "int", "512", "stage-1 padded input size (divisible by 32)"},
        {"loc.crop_w", "int", "384", "stage-2 crop width in the stage-1 frame"},
        {"loc.crop_h", "int", "288", "stage-2 crop height in the stage-1 frame"},
        {"loc.crop_pad_w", "int", "384", "stage-2 padded input width"},
        {"loc.crop_pad_h", "int", "320", "stage-2 padded input height"},
        {"loc.stride", "int", "2", "heatmap stride relative to network input"},
        {"loc.sigma", "double", "4.0", "ground-truth Gaussian sigma (heatmap px)"},
        {"loc.sigma_stage2", "double", "-1", "stage-2 sigma override (-1 inherits loc.sigma)"},
        {"loc.loss", "string", "kr", "localization loss: kr | mse"},
        {"loc.stage2_min_peak", "double", "0.0", "fall back to coarse below this stage-2 peak"},
        // loss parameters
        {"loss.alpha", "double", "2", "focal loss alpha"},
        {"loss.gamma", "double", "2", "focal loss gamma"},
        {"loss.beta", "double", "2", "F-beta loss beta"},
        {"loss.rho1", "double", "0.5", "hybrid weight on the focal term"},
        {"loss.rho2", "double", "0.5", "hybrid weight on the F-beta term"},
        {"loss.rho3", "double", "100", "keypoint loss weight on the MSE term"},
        {"loss.rho4", "double", "0.2", "keypoint loss weight on the overlap term"},
        {"loss.eps", "double", "1e-6", "smoothing epsilon in ratio terms"},
        {"loss.fbeta_conventional", "bool", "false", "use (1+beta^2) instead of (1+beta)"},
        {"loss.class_balanced_alpha", "bool", "false", "apply alpha / (1-alpha) per class"},
        // training
        {"train.batch_size", "int", "0", "batch size; 0 = task default (72 cls / 27 loc)"},
        {"train.epochs", "int", "100", "training epochs (the cosine schedule horizon)"},
        {"train.stop_after", "int", "0", "pause after this many epochs; 0 trains to the end"},
        {"train.lr0", "double", "0.001", "initial learning rate"},
        {"train.adam_beta1", "double", "0.9", "Adam first-moment decay"},
        {"train.adam_beta2", "double", "0.999", "Adam second-moment decay"},
        {"train.adam_eps", "double", "1e-8", "Adam epsilon"},
        {"train.weight_decay", "double", "0", "Adam weight decay"},
        {"train.crop_jitter", "double", "32", "stage-2 crop-center jitter (stage-1 frame px)"},
        {"train.crops_from_coarse", "bool", "false", "center stage-2 crops on coarse predictions"},
        {"train.grad_clip", "double", "0", "gradient-norm clip; 0 disables"},
        {"train.workers", "int", "0", "prefetch batch assembly on a worker thread"},
        {"train.augment_shift", "int", "0", "random translation augmentation (px); 0 disables"},
        // evaluation & reports
        {"eval.threshold", "double", "0.5", "classification decision threshold"},
        {"report.overlays", "bool", "false", "emit prediction overlay PNGs"},
    };
    return s;
}

namespace {

const SchemaEntry& find_entry(const std::string& key) {
    for (const auto& e : schema())
        if (e.key == key) return e;
    throw ValidationError("unknown config key: " + key);
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

void check_type(const SchemaEntry& e, const std::string& value) {
    try {
        size_t pos = 0;
        if (e.type == "int") {
            std::stoll(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("");
        } else if (e.type == "double") {
            std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("");
        } else if (e.type == "bool") {
            RunConfig::parse_bool(value);
        } else if (e.type == "ints") {
            std::stringstream ss(value);
            std::string item;
            while (std::getline(ss, item, ',')) {
                std::stoll(trim(item), &pos);
                if (pos != trim(item).size()) throw std::invalid_argument("");
            }
        }
        // strings accept anything
    } catch (const ValidationError&) {
        throw;
    } catch (const std::exception&) {
        throw ValidationError("config key " + e.key + " expects type " + e.type + ", got '" +
                              value + "'");
    }
}

}  // namespace

bool RunConfig::parse_bool(const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ValidationError("not a boolean: '" + value + "'");
}

RunConfig::RunConfig() {
    for (const auto& e : schema()) values_[e.key] = e.default_value;
}

void RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    load_text(ss.str(), path.string());
}

void RunConfig::load_string(const std::string& text) { load_text(text, "<config>"); }

void RunConfig::load_text(const std::string& text, const std::string& origin) {
    std::istringstream f(text);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError(origin + ":" + std::to_string(lineno) + ": expected key=value");
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto& entry = find_entry(key);
    check_type(entry, value);
    values_[key] = value;
}

int RunConfig::get_int(const std::string& key) const {
    find_entry(key);
    return static_cast<int>(std::stoll(values_.at(key)));
}

double RunConfig::get_double(const std::string& key) const {
    find_entry(key);
    return std::stod(values_.at(key));
}

bool RunConfig::get_bool(const std::string& key) const {
    find_entry(key);
    return parse_bool(values_.at(key));
}

const std::string& RunConfig::get_string(const std::string& key) const {
    find_entry(key);
    return values_.at(key);
}

std::vector<int> RunConfig::get_ints(const std::string& key) const {
    find_entry(key);
    std::vector<int> out;
    std::stringstream ss(values_.at(key));
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(std::stoll(trim(item))));
    return out;
}

std::string RunConfig::echo() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << "=" << v << "\n";
    return out.str();
}

void RunConfig::write_echo(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write config echo " + path.string());
    f << echo();
}

}  // namespace anglekit::config
