#pragma once

// Plain-text key=value run configuration. Every tunable default lives here and
// a fully resolved copy is written next to every run's outputs.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cxrnet/error.hpp"

namespace cxr {

enum class ConvFlavor { standard, separable };
enum class Padding { same, valid };

struct ModelConfig {
    int input_size = 150;  // square single-channel input
    std::vector<int> block_filters{32, 64, 128, 128, 128};
    int kernel = 3;
    ConvFlavor conv_flavor = ConvFlavor::standard;
    bool batchnorm = true;
    Padding padding = Padding::same;
    std::vector<int> dense_widths{512};
    double dropout = 0.5;
    double bn_momentum = 0.9;
    double bn_epsilon = 1e-5;

    int pad() const { return padding == Padding::same ? kernel / 2 : 0; }
};

// Three narrow blocks and a 32-wide head; trains on the synthetic corpus in
// seconds on one core.
inline ModelConfig toy_model_config(int input_size = 64) {
    ModelConfig m;
    m.input_size = input_size;
    m.block_filters = {8, 16, 32};
    m.dense_widths = {32};
    return m;
}

struct RunConfig {
    ModelConfig model;

    double lr = 1e-4;
    int batch = 32;
    int epochs = 20;
    int patience = 3;
    int stop_patience = 6;
    double min_delta = 1e-4;
    double lr_factor = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;

    int clahe_tiles_x = 8;
    int clahe_tiles_y = 8;
    double clahe_clip = 2.0;
    std::string preprocess_order = "clahe,resize";  // or "resize,clahe" or "resize"

    bool augment = true;
    double rotation_range = 15.0;
    double hflip_prob = 0.5;
    double zoom_min = 0.8;
    double zoom_max = 1.2;
    double shear_range = 0.2;

    double split_train = 0.8;
    double split_val = 0.1;
    double split_test = 0.1;

    std::uint64_t seed = 42;
    int threads = 1;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::string fmt_value(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}
inline std::string fmt_value(int v) { return std::to_string(v); }
inline std::string fmt_value(std::uint64_t v) { return std::to_string(v); }
inline std::string fmt_value(bool v) { return v ? "true" : "false"; }
inline std::string fmt_value(const std::string& v) { return v; }
inline std::string fmt_value(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}
inline std::string fmt_value(ConvFlavor f) { return f == ConvFlavor::standard ? "standard" : "separable"; }
inline std::string fmt_value(Padding p) { return p == Padding::same ? "same" : "valid"; }

[[noreturn]] inline void bad_value(const std::string& key, const std::string& v) {
    fail(ErrorKind::parameter, "invalid value '" + v + "' for config key '" + key + "'");
}

inline void parse_value(const std::string& key, const std::string& v, double& out) {
    try {
        std::size_t used = 0;
        out = std::stod(v, &used);
        if (used != v.size()) bad_value(key, v);
    } catch (const std::logic_error&) {
        bad_value(key, v);
    }
}
inline void parse_value(const std::string& key, const std::string& v, int& out) {
    try {
        std::size_t used = 0;
        out = std::stoi(v, &used);
        if (used != v.size()) bad_value(key, v);
    } catch (const std::logic_error&) {
        bad_value(key, v);
    }
}
inline void parse_value(const std::string& key, const std::string& v, std::uint64_t& out) {
    try {
        std::size_t used = 0;
        out = std::stoull(v, &used);
        if (used != v.size()) bad_value(key, v);
    } catch (const std::logic_error&) {
        bad_value(key, v);
    }
}
inline void parse_value(const std::string& key, const std::string& v, bool& out) {
    if (v == "true" || v == "1") out = true;
    else if (v == "false" || v == "0") out = false;
    else bad_value(key, v);
}
inline void parse_value(const std::string&, const std::string& v, std::string& out) { out = v; }
inline void parse_value(const std::string& key, const std::string& v, std::vector<int>& out) {
    out.clear();
    if (v.empty()) return;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        int x = 0;
        parse_value(key, trim(item), x);
        out.push_back(x);
    }
}
inline void parse_value(const std::string& key, const std::string& v, ConvFlavor& out) {
    if (v == "standard") out = ConvFlavor::standard;
    else if (v == "separable") out = ConvFlavor::separable;
    else bad_value(key, v);
}
inline void parse_value(const std::string& key, const std::string& v, Padding& out) {
    if (v == "same") out = Padding::same;
    else if (v == "valid") out = Padding::valid;
    else bad_value(key, v);
}

}  // namespace detail

template <typename F>
void visit_fields(ModelConfig& m, F&& f) {
    f("input_size", m.input_size);
    f("block_filters", m.block_filters);
    f("kernel", m.kernel);
    f("conv_flavor", m.conv_flavor);
    f("batchnorm", m.batchnorm);
    f("padding", m.padding);
    f("dense_widths", m.dense_widths);
    f("dropout", m.dropout);
    f("bn_momentum", m.bn_momentum);
    f("bn_epsilon", m.bn_epsilon);
}

template <typename F>
void visit_fields(RunConfig& c, F&& f) {
    visit_fields(c.model, f);
    f("lr", c.lr);
    f("batch", c.batch);
    f("epochs", c.epochs);
    f("patience", c.patience);
    f("stop_patience", c.stop_patience);
    f("min_delta", c.min_delta);
    f("lr_factor", c.lr_factor);
    f("adam_beta1", c.adam_beta1);
    f("adam_beta2", c.adam_beta2);
    f("adam_epsilon", c.adam_epsilon);
    f("clahe_tiles_x", c.clahe_tiles_x);
    f("clahe_tiles_y", c.clahe_tiles_y);
    f("clahe_clip", c.clahe_clip);
    f("preprocess_order", c.preprocess_order);
    f("augment", c.augment);
    f("rotation_range", c.rotation_range);
    f("hflip_prob", c.hflip_prob);
    f("zoom_min", c.zoom_min);
    f("zoom_max", c.zoom_max);
    f("shear_range", c.shear_range);
    f("split_train", c.split_train);
    f("split_val", c.split_val);
    f("split_test", c.split_test);
    f("seed", c.seed);
    f("threads", c.threads);
}

template <typename Config>
std::string to_text(const Config& cfg) {
    Config copy = cfg;
    std::string out;
    visit_fields(copy, [&](const char* key, auto& field) {
        out += std::string(key) + "=" + detail::fmt_value(field) + "\n";
    });
    return out;
}

// Applies key=value lines over `cfg`. Blank lines and '#' comments are skipped;
// unknown keys are rejected.
template <typename Config>
void apply_text(Config& cfg, const std::string& text) {
    std::map<std::string, std::string> kv;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::parameter,
                "config line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
        kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    visit_fields(cfg, [&](const char* key, auto& field) {
        const auto it = kv.find(key);
        if (it == kv.end()) return;
        detail::parse_value(key, it->second, field);
        kv.erase(it);
    });
    if (!kv.empty()) fail(ErrorKind::parameter, "unknown config key '" + kv.begin()->first + "'");
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig cfg;
    apply_text(cfg, ss.str());
    return cfg;
}

inline void validate(const RunConfig& c) {
    require(c.lr > 0, ErrorKind::parameter, "lr must be > 0");
    require(c.batch >= 1, ErrorKind::parameter, "batch must be >= 1");
    require(c.epochs >= 1, ErrorKind::parameter, "epochs must be >= 1");
    require(c.patience >= 1 && c.stop_patience >= 1, ErrorKind::parameter,
            "patience and stop_patience must be >= 1");
    require(c.lr_factor > 0 && c.lr_factor < 1, ErrorKind::parameter, "lr_factor must be in (0,1)");
    require(c.min_delta >= 0, ErrorKind::parameter, "min_delta must be >= 0");
    require(c.preprocess_order == "clahe,resize" || c.preprocess_order == "resize,clahe" ||
                c.preprocess_order == "resize",
            ErrorKind::parameter, "preprocess_order must be clahe,resize | resize,clahe | resize");
    require(c.rotation_range >= 0 && c.rotation_range <= 15, ErrorKind::parameter,
            "rotation_range must be in [0, 15]");
    require(c.zoom_min >= 0.8 && c.zoom_max <= 1.2 && c.zoom_min <= c.zoom_max, ErrorKind::parameter,
            "zoom range must lie in [0.8, 1.2]");
    require(c.shear_range >= 0 && c.shear_range <= 0.2, ErrorKind::parameter,
            "shear_range must be in [0, 0.2]");
    require(c.hflip_prob >= 0 && c.hflip_prob <= 1, ErrorKind::parameter, "hflip_prob must be in [0,1]");
    const double s = c.split_train + c.split_val + c.split_test;
    require(std::abs(s - 1.0) < 1e-9, ErrorKind::parameter, "split fractions must sum to 1");
    require(c.threads >= 1, ErrorKind::parameter, "threads must be >= 1");
}

}  // namespace cxr
