#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace anglekit::config {

// Flat dotted-key configuration ("train.batch_size=72", one key per line,
// '#' comments). Every key is validated against a fixed schema before any
// work starts; unknown keys and type mismatches are rejected.
class RunConfig {
public:
    RunConfig();  // all schema defaults

    void load_file(const std::filesystem::path& path);
    void load_string(const std::string& text);  // same syntax as a config file
    void set(const std::string& key, const std::string& value);  // validated

    int get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    const std::string& get_string(const std::string& key) const;
    std::vector<int> get_ints(const std::string& key) const;  // comma-separated

    // Full resolved view (every schema key with its final value), suitable
    // for echoing into a run directory to make the run reproducible.
    std::string echo() const;
    void write_echo(const std::filesystem::path& path) const;

    static bool parse_bool(const std::string& value);

private:
    void load_text(const std::string& text, const std::string& origin);

    std::map<std::string, std::string> values_;
};

struct SchemaEntry {
    std::string key;
    std::string type;  // int | double | bool | string | ints
    std::string default_value;
    std::string help;
};

const std::vector<SchemaEntry>& schema();

}  // namespace anglekit::config
