#include "anglekit/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <future>
#include <iostream>
#include <mutex>
#include <numeric>
#include <random>

#include <ATen/CPUGeneratorImpl.h>

#include "anglekit/common.hpp"
#include "anglekit/evaluation.hpp"

namespace anglekit::train {

double cosine_lr(std::int64_t t, std::int64_t total, double lr0) {
    if (total <= 0) throw ValidationError("cosine schedule needs a positive horizon");
    if (t < 0 || t > total)
        throw ValidationError("cosine schedule step " + std::to_string(t) +
                              " outside [0, " + std::to_string(total) + "]");
    return 0.5 * lr0 * (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(total)));
}

void write_history_csv(const History& h, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "epoch,lr,train_loss,val_metric\n";
    char buf[160];
    for (const auto& r : h.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g", r.epoch, r.lr, r.train_loss,
                      r.val_metric);
        f << buf << "\n";
    }
}

namespace {

constexpr const char* kMagic = "ANGLEKIT.CKPT";
constexpr std::int64_t kVersion = 1;

torch::Tensor cpu_rng_state() {
    at::Generator gen = at::detail::getDefaultCPUGenerator();
    std::lock_guard<std::mutex> lock(gen.mutex());
    return gen.get_state();
}

void set_cpu_rng_state(const torch::Tensor& state) {
    at::Generator gen = at::detail::getDefaultCPUGenerator();
    std::lock_guard<std::mutex> lock(gen.mutex());
    gen.set_state(state);
}

void set_lr(torch::optim::Optimizer& optim, double lr) {
    for (auto& group : optim.param_groups())
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

std::vector<std::vector<std::int64_t>> make_batches(std::int64_t n, int batch_size,
                                                    std::mt19937_64& rng) {
    std::vector<std::int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::int64_t>> batches;
    for (std::int64_t i = 0; i < n; i += batch_size) {
        const auto end = std::min<std::int64_t>(i + batch_size, n);
        batches.emplace_back(order.begin() + i, order.begin() + end);
    }
    return batches;
}

// Runs step(b, batch) over `count` batches; with workers the next batch is
// assembled on a thread while the current one is stepped (delivery order is
// fixed, so the schedule is identical either way).
template <typename Batch, typename Make, typename Step>
void run_batches(std::size_t count, int workers, Make make, Step step) {
    if (workers > 0 && count > 0) {
        std::future<Batch> pending = std::async(std::launch::async, make, std::size_t{0});
        for (std::size_t b = 0; b < count; ++b) {
            Batch cur = pending.get();
            if (b + 1 < count) pending = std::async(std::launch::async, make, b + 1);
            step(b, std::move(cur));
        }
    } else {
        for (std::size_t b = 0; b < count; ++b) step(b, make(b));
    }
}

struct ResumeState {
    std::int64_t start_epoch = 0;
    std::int64_t step = 0;
    std::int64_t best_epoch = -1;
    double best_metric = 0.0;
};

ResumeState apply_resume(const std::optional<std::filesystem::path>& resume,
                         const std::string& task, std::int64_t total_steps,
                         torch::nn::Module& model, torch::optim::Optimizer& optim) {
    ResumeState rs;
    if (!resume) return rs;
    auto meta = load_checkpoint(*resume, model, &optim);
    if (meta.task != task)
        throw ValidationError("checkpoint trains '" + meta.task + "', expected '" + task + "'");
    if (meta.total_steps != total_steps)
        throw ValidationError("checkpoint schedule spans " + std::to_string(meta.total_steps) +
                              " steps, this run spans " + std::to_string(total_steps));
    rs.start_epoch = meta.epoch;
    rs.step = meta.step;
    rs.best_epoch = meta.best_epoch;
    rs.best_metric = meta.best_metric;
    return rs;
}

void checkpoint_epoch(const std::filesystem::path& out_dir, const std::string& task,
                      const std::string& config_echo, std::int64_t epochs_done,
                      std::int64_t step, std::int64_t total_steps, std::int64_t best_epoch,
                      double best_metric, bool improved, torch::nn::Module& model,
                      torch::optim::Optimizer& optim, const History& hist) {
    if (out_dir.empty()) return;
    std::filesystem::create_directories(out_dir);
    CheckpointMeta meta;
    meta.task = task;
    meta.config_echo = config_echo;
    meta.epoch = epochs_done;
    meta.step = step;
    meta.total_steps = total_steps;
    meta.best_epoch = best_epoch;
    meta.best_metric = best_metric;
    save_checkpoint(out_dir / "last.ckpt", meta, model, &optim);
    if (improved) save_checkpoint(out_dir / "best.ckpt", meta, model, &optim);
    write_history_csv(hist, out_dir / "history.csv");
}

// Zero-filled integer translation of a (1,S,S) image tensor.
torch::Tensor shift_image(const torch::Tensor& img, int dx, int dy) {
    if (dx == 0 && dy == 0) return img;
    namespace F = torch::nn::functional;
    const auto h = img.size(1), w = img.size(2);
    auto padded = F::pad(img.unsqueeze(0),
                         F::PadFuncOptions({std::abs(dx), std::abs(dx), std::abs(dy),
                                            std::abs(dy)})
                             .mode(torch::kConstant)
                             .value(0))
                      .squeeze(0);
    return padded
        .narrow(1, std::abs(dy) - dy, h)
        .narrow(2, std::abs(dx) - dx, w)
        .contiguous();
}

torch::Tensor mat_to_tensor(const cv::Mat& m) {
    TORCH_CHECK(m.type() == CV_32F && m.isContinuous(), "expected continuous float image");
    return torch::from_blob(m.data, {m.rows, m.cols}, torch::kFloat32).clone();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     torch::nn::Module& model, torch::optim::Optimizer* optimizer) {
    torch::serialize::OutputArchive root;
    root.write("magic", c10::IValue(std::string(kMagic)));
    root.write("version", c10::IValue(kVersion));
    root.write("task", c10::IValue(meta.task));
    root.write("config_echo", c10::IValue(meta.config_echo));
    root.write("epoch", c10::IValue(meta.epoch));
    root.write("step", c10::IValue(meta.step));
    root.write("total_steps", c10::IValue(meta.total_steps));
    root.write("best_epoch", c10::IValue(meta.best_epoch));
    root.write("best_metric", c10::IValue(meta.best_metric));
    {
        torch::serialize::OutputArchive m;
        model.save(m);
        root.write("model", m);
    }
    if (optimizer) {
        torch::serialize::OutputArchive o;
        optimizer->save(o);
        root.write("optim", o);
    }
    root.write("rng_state", cpu_rng_state(), /*is_buffer=*/true);
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    root.save_to(path.string());
}

namespace {

CheckpointMeta open_checkpoint(const std::filesystem::path& path,
                               torch::serialize::InputArchive& root) {
    if (!std::filesystem::exists(path))
        throw ValidationError("checkpoint not found: " + path.string());
    try {
        root.load_from(path.string());
    } catch (const std::exception&) {
        throw ValidationError("unreadable checkpoint: " + path.string());
    }
    c10::IValue v;
    if (!root.try_read("magic", v) || !v.isString() || v.toStringRef() != kMagic)
        throw ValidationError("not a checkpoint file: " + path.string());
    root.read("version", v);
    if (v.toInt() != kVersion)
        throw ValidationError("unsupported checkpoint version " + std::to_string(v.toInt()));
    CheckpointMeta meta;
    root.read("task", v);
    meta.task = v.toStringRef();
    root.read("config_echo", v);
    meta.config_echo = v.toStringRef();
    root.read("epoch", v);
    meta.epoch = v.toInt();
    root.read("step", v);
    meta.step = v.toInt();
    root.read("total_steps", v);
    meta.total_steps = v.toInt();
    root.read("best_epoch", v);
    meta.best_epoch = v.toInt();
    root.read("best_metric", v);
    meta.best_metric = v.toDouble();
    return meta;
}

}  // namespace

CheckpointMeta load_checkpoint(const std::filesystem::path& path, torch::nn::Module& model,
                               torch::optim::Optimizer* optimizer) {
    torch::serialize::InputArchive root;
    auto meta = open_checkpoint(path, root);
    torch::serialize::InputArchive m;
    root.read("model", m);
    model.load(m);
    if (optimizer) {
        torch::serialize::InputArchive o;
        if (!root.try_read("optim", o))
            throw ValidationError("checkpoint has no optimizer state: " + path.string());
        optimizer->load(o);
    }
    torch::Tensor rng;
    if (root.try_read("rng_state", rng, /*is_buffer=*/true)) set_cpu_rng_state(rng);
    return meta;
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
    torch::serialize::InputArchive root;
    return open_checkpoint(path, root);
}

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, const OptimConfig& opt) {
    if (opt.lr0 <= 0.0) throw ValidationError("lr0 must be positive");
    auto options = torch::optim::AdamOptions(opt.lr0)
                       .betas(std::make_tuple(opt.adam_beta1, opt.adam_beta2))
                       .eps(opt.adam_eps)
                       .weight_decay(opt.weight_decay);
    return torch::optim::Adam(std::move(params), options);
}

namespace {

double classifier_val_auc(models::Classifier& model, const ClsData& val, int batch_size) {
    torch::NoGradGuard ng;
    model->eval();
    const auto n = val.x.size(0);
    std::vector<eval::ScoredSample> samples;
    samples.reserve(n);
    for (std::int64_t i = 0; i < n; i += batch_size) {
        const auto end = std::min<std::int64_t>(i + batch_size, n);
        auto p = model->forward(val.x.slice(0, i, end)).reshape({-1});
        auto y = val.y.slice(0, i, end).reshape({-1});
        for (std::int64_t j = 0; j < p.size(0); ++j)
            samples.push_back({"", data::Side::left, p[j].item<double>(),
                               y[j].item<double>() >= 0.5 ? 1 : 0});
    }
    return eval::roc_auc(samples);
}

void check_cls_data(const ClsData& d, const char* what) {
    if (!d.x.defined() || d.x.dim() != 4 || d.x.size(0) == 0)
        throw ValidationError(std::string("empty ") + what + " fold");
    if (!d.y.defined() || d.y.size(0) != d.x.size(0))
        throw ValidationError(std::string(what) + " labels do not match images");
}

}  // namespace

History train_classifier(models::Classifier& model, const ClsData& train_data,
                         const ClsData& val_data, const OptimConfig& opt, const TrainConfig& tc,
                         const ClsLossParams& lp, const std::filesystem::path& out_dir,
                         const std::string& config_echo,
                         const std::optional<std::filesystem::path>& resume) {
    check_cls_data(train_data, "training");
    check_cls_data(val_data, "validation");
    if (tc.batch_size < 1) throw ValidationError("batch size must be >= 1");
    if (tc.epochs < 1) throw ValidationError("epochs must be >= 1");

    const std::int64_t n = train_data.x.size(0);
    const std::int64_t steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
    const std::int64_t total_steps = steps_per_epoch * tc.epochs;
    const int end_epoch = tc.stop_after_epochs > 0 ? std::min(tc.stop_after_epochs, tc.epochs)
                                                   : tc.epochs;

    auto optim = make_adam(model->parameters(), opt);
    const auto rs = apply_resume(resume, "classifier", total_steps, *model, optim);
    std::int64_t step = rs.step;
    std::int64_t best_epoch = rs.best_epoch;
    double best_metric = rs.best_metric;

    History hist;
    hist.best_epoch = static_cast<int>(best_epoch);
    hist.best_metric = best_metric;

    struct Batch {
        torch::Tensor x, y;
    };

    for (int epoch = static_cast<int>(rs.start_epoch); epoch < end_epoch; ++epoch) {
        model->train();
        std::mt19937_64 rng(derive_seed(tc.seed, static_cast<std::uint64_t>(epoch)));
        const auto batches = make_batches(n, tc.batch_size, rng);

        // Per-slot augmentation draws happen up front on one thread so the
        // stream is identical with and without prefetch workers.
        std::vector<std::pair<int, int>> shifts(n, {0, 0});
        if (tc.augment_shift > 0) {
            std::uniform_int_distribution<int> d(-tc.augment_shift, tc.augment_shift);
            for (auto& s : shifts) {
                s.first = d(rng);
                s.second = d(rng);
            }
        }

        auto make = [&](std::size_t b) {
            const auto& idx = batches[b];
            std::vector<torch::Tensor> xs;
            xs.reserve(idx.size());
            std::size_t slot = 0;
            for (std::size_t k = 0; k < b; ++k) slot += batches[k].size();
            for (std::size_t k = 0; k < idx.size(); ++k) {
                auto img = train_data.x[idx[k]];
                const auto& s = shifts[slot + k];
                xs.push_back(shift_image(img, s.first, s.second));
            }
            auto sel = torch::tensor(idx, torch::kInt64);
            return Batch{torch::stack(xs, 0), train_data.y.index_select(0, sel)};
        };

        double loss_sum = 0.0;
        double first_lr = 0.0;
        run_batches<Batch>(batches.size(), tc.workers, make, [&](std::size_t b, Batch batch) {
            const double lr = cosine_lr(step, total_steps, opt.lr0);
            if (b == 0) first_lr = lr;
            set_lr(optim, lr);
            hist.step_lrs.push_back(lr);
            optim.zero_grad();
            auto pred = model->forward(batch.x);
            auto loss = losses::hybrid_loss(pred, batch.y, lp.hybrid, lp.focal, lp.fbeta);
            loss.backward();
            if (tc.grad_clip > 0.0)
                torch::nn::utils::clip_grad_norm_(model->parameters(), tc.grad_clip);
            optim.step();
            loss_sum += loss.item<double>() * static_cast<double>(batch.x.size(0));
            ++step;
        });

        const double val_auc = classifier_val_auc(model, val_data, tc.batch_size);
        hist.rows.push_back({epoch, first_lr, loss_sum / static_cast<double>(n), val_auc});
        std::cerr << "[cls] epoch " << epoch + 1 << "/" << tc.epochs << " lr " << first_lr
                  << " loss " << loss_sum / static_cast<double>(n) << " val_auc " << val_auc
                  << "\n";

        const bool improved = best_epoch < 0 || val_auc > best_metric;
        if (improved) {
            best_metric = val_auc;
            best_epoch = epoch;
        }
        hist.best_epoch = static_cast<int>(best_epoch);
        hist.best_metric = best_metric;
        checkpoint_epoch(out_dir, "classifier", config_echo, epoch + 1, step, total_steps,
                         best_epoch, best_metric, improved, *model, optim, hist);
    }
    return hist;
}

namespace {

void check_loc_data(const LocData& d, const char* what) {
    const auto n = d.resized.size();
    if (n == 0) throw ValidationError(std::string("empty ") + what + " fold");
    if (d.gt_resized.size() != n || d.gt_raw.size() != n || d.resized_to_raw.size() != n)
        throw ValidationError(std::string(what) + " fold arrays disagree in length");
    for (const auto& m : d.resized)
        if (m.empty() || m.type() != CV_32F || !m.isContinuous())
            throw ValidationError(std::string(what) + " images must be continuous float mats");
}

struct LocBatch {
    torch::Tensor x, target;
};

// One stage-1 sample: the resized half placed at (dx,dy) in a zero canvas,
// with the Gaussian target encoded at the shifted ground truth.
std::pair<torch::Tensor, torch::Tensor> make_stage1_sample(const cv::Mat& resized,
                                                           const geometry::Point2D& gt,
                                                           int pad_size, int dx, int dy,
                                                           int stride, double sigma) {
    cv::Mat canvas = cv::Mat::zeros(pad_size, pad_size, CV_32F);
    resized.copyTo(canvas(cv::Rect(dx, dy, resized.cols, resized.rows)));
    const geometry::Point2D gt_pad{gt.x + dx, gt.y + dy};
    auto hm = geometry::encode_heatmap(geometry::input_to_heatmap(gt_pad, stride),
                                       pad_size / stride, pad_size / stride, {sigma}, stride);
    return {mat_to_tensor(canvas).unsqueeze(0), mat_to_tensor(hm.values).unsqueeze(0)};
}

struct CropSample {
    cv::Mat padded;                            // crop_pad_w x crop_pad_h canvas
    geometry::Point2D gt_pad;                  // ground truth in the padded crop frame
    bool gt_inside = true;                     // false -> all-zero target
    geometry::SimilarityTransform2D to_resized;  // padded-crop frame -> resized frame
};

CropSample make_crop_sample(const cv::Mat& resized, const geometry::Point2D& center,
                            const geometry::Point2D& gt, const LocTrainParams& lp) {
    auto [crop, to_resized] = geometry::crop_window(resized, center, lp.crop_w, lp.crop_h);
    CropSample s;
    s.padded = models::pad_to(crop, lp.crop_pad_w, lp.crop_pad_h);
    s.to_resized = to_resized;  // padding is top-left, so it adds nothing
    s.gt_pad = geometry::apply_transform(geometry::invert(to_resized), gt);
    s.gt_inside = s.gt_pad.x >= 0.0 && s.gt_pad.x < lp.crop_w && s.gt_pad.y >= 0.0 &&
                  s.gt_pad.y < lp.crop_h;
    return s;
}

torch::Tensor crop_target(const CropSample& s, const LocTrainParams& lp) {
    const int hw = lp.crop_pad_w / lp.stride, hh = lp.crop_pad_h / lp.stride;
    if (!s.gt_inside) return torch::zeros({1, hh, hw}, torch::kFloat32);
    auto hm = geometry::encode_heatmap(geometry::input_to_heatmap(s.gt_pad, lp.stride), hh, hw,
                                       {lp.sigma}, lp.stride);
    return mat_to_tensor(hm.values).unsqueeze(0);
}

// Decodes one channel of a network output back to a raw-frame point.
geometry::Point2D decode_to_raw(const torch::Tensor& out_hw, int stride, double clamp_w,
                                double clamp_h,
                                const geometry::SimilarityTransform2D& to_resized_or_identity,
                                const geometry::SimilarityTransform2D& resized_to_raw) {
    cv::Mat m(static_cast<int>(out_hw.size(0)), static_cast<int>(out_hw.size(1)), CV_32F);
    auto c = out_hw.contiguous();
    std::memcpy(m.data, c.data_ptr<float>(), sizeof(float) * m.total());
    geometry::Point2D in_frame;
    if (auto dr = geometry::decode_heatmap({m, stride})) {
        in_frame = geometry::heatmap_to_input(dr->point, stride);
    } else {
        in_frame = {clamp_w / 2.0, clamp_h / 2.0};  // no response anywhere
    }
    in_frame.x = std::clamp(in_frame.x, 0.0, clamp_w - 1.0);
    in_frame.y = std::clamp(in_frame.y, 0.0, clamp_h - 1.0);
    const auto resized_pt = geometry::apply_transform(to_resized_or_identity, in_frame);
    return geometry::apply_transform(resized_to_raw, resized_pt);
}

double localizer_val_ed(models::Localizer& model, const LocData& val, int stage,
                        const TrainConfig& tc, const LocTrainParams& lp,
                        const std::vector<geometry::Point2D>& val_centers) {
    torch::NoGradGuard ng;
    model->eval();
    const std::size_t n = val.resized.size();
    double sum = 0.0;
    for (std::size_t i0 = 0; i0 < n; i0 += tc.batch_size) {
        const std::size_t i1 = std::min(n, i0 + static_cast<std::size_t>(tc.batch_size));
        std::vector<torch::Tensor> xs;
        std::vector<CropSample> crops;
        for (std::size_t i = i0; i < i1; ++i) {
            if (stage == 1) {
                xs.push_back(make_stage1_sample(val.resized[i], val.gt_resized[i], lp.pad_size,
                                                0, 0, lp.stride, lp.sigma)
                                 .first);
            } else {
                auto s = make_crop_sample(val.resized[i], val_centers[i], val.gt_resized[i], lp);
                xs.push_back(mat_to_tensor(s.padded).unsqueeze(0));
                crops.push_back(std::move(s));
            }
        }
        auto out = model->forward(torch::stack(xs, 0));
        for (std::size_t i = i0; i < i1; ++i) {
            const auto ch = out[i - i0][0];
            geometry::Point2D raw;
            if (stage == 1) {
                raw = decode_to_raw(ch, lp.stride, val.resized[i].cols, val.resized[i].rows,
                                    geometry::SimilarityTransform2D::identity(),
                                    val.resized_to_raw[i]);
            } else {
                raw = decode_to_raw(ch, lp.stride, lp.crop_w, lp.crop_h,
                                    crops[i - i0].to_resized, val.resized_to_raw[i]);
            }
            sum += std::hypot(raw.x - val.gt_raw[i].x, raw.y - val.gt_raw[i].y);
        }
    }
    return sum / static_cast<double>(n);
}

}  // namespace

History train_localizer(models::Localizer& model, const LocData& train_data,
                        const LocData& val_data, int stage, const OptimConfig& opt,
                        const TrainConfig& tc, const LocTrainParams& lp,
                        const std::filesystem::path& out_dir, const std::string& config_echo,
                        const std::optional<std::filesystem::path>& resume) {
    if (stage != 1 && stage != 2) throw ValidationError("stage must be 1 or 2");
    check_loc_data(train_data, "training");
    check_loc_data(val_data, "validation");
    if (tc.batch_size < 1) throw ValidationError("batch size must be >= 1");
    if (tc.epochs < 1) throw ValidationError("epochs must be >= 1");
    if (lp.stride < 1) throw ValidationError("stride must be >= 1");
    if (lp.pad_size % 32 != 0 || lp.crop_pad_w % 32 != 0 || lp.crop_pad_h % 32 != 0)
        throw ValidationError("network input sizes must be multiples of 32");

    const std::size_t n = train_data.resized.size();
    if (stage == 1) {
        for (const auto& m : train_data.resized)
            if (m.cols > lp.pad_size || m.rows > lp.pad_size)
                throw ValidationError("stage-1 pad size smaller than a resized input");
        for (const auto& m : val_data.resized)
            if (m.cols > lp.pad_size || m.rows > lp.pad_size)
                throw ValidationError("stage-1 pad size smaller than a resized input");
    } else {
        if (tc.crops_from_coarse) {
            if (train_data.coarse_resized.size() != n ||
                val_data.coarse_resized.size() != val_data.resized.size())
                throw ValidationError("crops_from_coarse needs coarse points for every half");
        } else if (tc.crop_jitter <= 0.0) {
            throw ValidationError("stage 2 needs crop_jitter > 0 or coarse points");
        }
    }

    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(n) + tc.batch_size - 1) / tc.batch_size;
    const std::int64_t total_steps = steps_per_epoch * tc.epochs;
    const int end_epoch = tc.stop_after_epochs > 0 ? std::min(tc.stop_after_epochs, tc.epochs)
                                                   : tc.epochs;
    const std::string task = stage == 1 ? "localizer_stage1" : "localizer_stage2";

    auto optim = make_adam(model->parameters(), opt);
    const auto rs = apply_resume(resume, task, total_steps, *model, optim);
    std::int64_t step = rs.step;
    std::int64_t best_epoch = rs.best_epoch;
    double best_metric = rs.best_metric;

    // Fixed validation crop centers so the epoch metric is comparable: coarse
    // points when supplied, otherwise ground truth plus one frozen jitter draw.
    std::vector<geometry::Point2D> val_centers;
    if (stage == 2) {
        if (tc.crops_from_coarse) {
            val_centers = val_data.coarse_resized;
        } else {
            std::mt19937_64 vrng(derive_seed(tc.seed, 0x5A11));
            std::uniform_real_distribution<double> d(-tc.crop_jitter, tc.crop_jitter);
            for (const auto& gt : val_data.gt_resized) {
                const double jx = d(vrng), jy = d(vrng);
                val_centers.push_back({gt.x + jx, gt.y + jy});
            }
        }
    }

    History hist;
    hist.best_epoch = static_cast<int>(best_epoch);
    hist.best_metric = best_metric;

    for (int epoch = static_cast<int>(rs.start_epoch); epoch < end_epoch; ++epoch) {
        model->train();
        std::mt19937_64 rng(derive_seed(tc.seed, static_cast<std::uint64_t>(epoch)));
        const auto batches = make_batches(n, tc.batch_size, rng);

        // All random draws for the epoch happen here, in slot order.
        std::vector<std::pair<double, double>> draws(n, {0.0, 0.0});
        if (stage == 1 && tc.augment_shift > 0) {
            for (std::size_t slot = 0, b = 0; b < batches.size(); ++b)
                for (const auto idx : batches[b]) {
                    const auto& m = train_data.resized[idx];
                    std::uniform_int_distribution<int> dx(
                        0, std::min(tc.augment_shift, lp.pad_size - m.cols));
                    std::uniform_int_distribution<int> dy(
                        0, std::min(tc.augment_shift, lp.pad_size - m.rows));
                    draws[slot++] = {static_cast<double>(dx(rng)), static_cast<double>(dy(rng))};
                }
        } else if (stage == 2 && !tc.crops_from_coarse) {
            std::uniform_real_distribution<double> d(-tc.crop_jitter, tc.crop_jitter);
            for (auto& j : draws) {
                j.first = d(rng);
                j.second = d(rng);
            }
        }

        auto make = [&](std::size_t b) {
            const auto& idx = batches[b];
            std::size_t slot = 0;
            for (std::size_t k = 0; k < b; ++k) slot += batches[k].size();
            std::vector<torch::Tensor> xs, ts;
            for (std::size_t k = 0; k < idx.size(); ++k) {
                const auto i = idx[k];
                if (stage == 1) {
                    auto [x, t] = make_stage1_sample(
                        train_data.resized[i], train_data.gt_resized[i], lp.pad_size,
                        static_cast<int>(draws[slot + k].first),
                        static_cast<int>(draws[slot + k].second), lp.stride, lp.sigma);
                    xs.push_back(std::move(x));
                    ts.push_back(std::move(t));
                } else {
                    const auto& gt = train_data.gt_resized[i];
                    geometry::Point2D center =
                        tc.crops_from_coarse
                            ? train_data.coarse_resized[i]
                            : geometry::Point2D{gt.x + draws[slot + k].first,
                                                gt.y + draws[slot + k].second};
                    auto s = make_crop_sample(train_data.resized[i], center, gt, lp);
                    xs.push_back(mat_to_tensor(s.padded).unsqueeze(0));
                    ts.push_back(crop_target(s, lp));
                }
            }
            return LocBatch{torch::stack(xs, 0), torch::stack(ts, 0)};
        };

        double loss_sum = 0.0;
        double first_lr = 0.0;
        run_batches<LocBatch>(batches.size(), tc.workers, make, [&](std::size_t b, LocBatch batch) {
            const double lr = cosine_lr(step, total_steps, opt.lr0);
            if (b == 0) first_lr = lr;
            set_lr(optim, lr);
            hist.step_lrs.push_back(lr);
            optim.zero_grad();
            auto pred = model->forward(batch.x);
            auto loss = lp.use_mse ? torch::mse_loss(pred, batch.target)
                                   : losses::kr_loss(pred, batch.target, lp.kr);
            loss.backward();
            if (tc.grad_clip > 0.0)
                torch::nn::utils::clip_grad_norm_(model->parameters(), tc.grad_clip);
            optim.step();
            loss_sum += loss.item<double>() * static_cast<double>(batch.x.size(0));
            ++step;
        });

        const double val_ed = localizer_val_ed(model, val_data, stage, tc, lp, val_centers);
        hist.rows.push_back({epoch, first_lr, loss_sum / static_cast<double>(n), val_ed});
        std::cerr << "[loc" << stage << "] epoch " << epoch + 1 << "/" << tc.epochs << " lr "
                  << first_lr << " loss " << loss_sum / static_cast<double>(n) << " val_ed "
                  << val_ed << "\n";

        const bool improved = best_epoch < 0 || val_ed < best_metric;
        if (improved) {
            best_metric = val_ed;
            best_epoch = epoch;
        }
        hist.best_epoch = static_cast<int>(best_epoch);
        hist.best_metric = best_metric;
        checkpoint_epoch(out_dir, task, config_echo, epoch + 1, step, total_steps, best_epoch,
                         best_metric, improved, *model, optim, hist);
    }
    return hist;
}

}  // namespace anglekit::train
