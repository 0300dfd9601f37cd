#include "s3seg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "s3seg/image_io.hpp"

namespace fs = std::filesystem;

namespace s3seg {

namespace {

constexpr const char* kMaskExtensions[] = {".png", ".pgm", ".ppm", ".bmp"};

bool supported_extension(std::string ext) {
    for (char& c : ext) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    for (const char* e : kMaskExtensions) {
        if (ext == e) {
            return true;
        }
    }
    return false;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_i64(std::int64_t v) { return std::to_string(v); }
std::string fmt_u64(std::uint64_t v) { return std::to_string(v); }

std::string strip(const std::string& s) {
    std::size_t a = 0;
    std::size_t b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) {
        ++a;
    }
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) {
        --b;
    }
    return s.substr(a, b - a);
}

double parse_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config value for " + key + " is not a number: " + value);
    }
    if (pos != value.size() || !std::isfinite(v)) {
        throw ConfigError("config value for " + key + " is not a number: " + value);
    }
    return v;
}

std::int64_t parse_i64(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    std::int64_t v = 0;
    try {
        v = std::stoll(value, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config value for " + key + " is not an integer: " + value);
    }
    if (pos != value.size()) {
        throw ConfigError("config value for " + key + " is not an integer: " + value);
    }
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config value for " + key + " is not an unsigned integer: " + value);
    }
    if (pos != value.size() || (!value.empty() && value[0] == '-')) {
        throw ConfigError("config value for " + key + " is not an unsigned integer: " + value);
    }
    return v;
}

std::vector<std::int64_t> parse_i64_list(const std::string& key, const std::string& value) {
    std::vector<std::int64_t> out;
    std::string item;
    std::stringstream ss(value);
    while (std::getline(ss, item, ',')) {
        out.push_back(parse_i64(key, strip(item)));
    }
    if (out.empty()) {
        throw ConfigError("config value for " + key + " is an empty list");
    }
    return out;
}

std::string serialize_i64_list(const std::vector<std::int64_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) {
            out += ',';
        }
        out += std::to_string(v[i]);
    }
    return out;
}

void apply_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "seed") {
        cfg.seed = parse_u64(key, value);
    } else if (key == "out_dir") {
        cfg.out_dir = value;
    } else if (key == "mask_suffix") {
        cfg.mask_suffix = value;
    } else if (key == "jobs") {
        cfg.jobs = parse_i64(key, value);
    } else if (key == "model.in_channels") {
        cfg.model.in_channels = parse_i64(key, value);
    } else if (key == "model.channels") {
        cfg.model.channels = parse_i64(key, value);
        cfg.model.lka.channels = cfg.model.channels;
    } else if (key == "model.blocks") {
        cfg.model.blocks = parse_i64(key, value);
    } else if (key == "model.clusters") {
        cfg.model.clusters = parse_i64(key, value);
    } else if (key == "model.dilation") {
        cfg.model.lka.dilation = parse_i64(key, value);
    } else if (key == "model.k_lka") {
        cfg.model.lka.k_lka = parse_i64(key, value);
    } else if (key == "model.r_set") {
        cfg.model.lka.r_set = parse_i64_list(key, value);
    } else if (key == "model.deform_kernel") {
        cfg.model.deform_kernel = parse_i64(key, value);
    } else if (key == "optim.lr") {
        cfg.optim.lr = parse_double(key, value);
    } else if (key == "optim.momentum") {
        cfg.optim.momentum = parse_double(key, value);
    } else if (key == "optim.max_iterations") {
        cfg.optim.max_iterations = parse_i64(key, value);
    } else if (key == "optim.min_cluster_stop") {
        cfg.optim.min_cluster_stop = parse_i64(key, value);
    } else if (key == "loss.lambda1") {
        cfg.weights.lambda1 = parse_double(key, value);
    } else if (key == "loss.lambda2") {
        cfg.weights.lambda2 = parse_double(key, value);
    } else if (key == "loss.lambda3") {
        cfg.weights.lambda3 = parse_double(key, value);
    } else if (key == "affine.rotation_min_deg") {
        cfg.ranges.rotation_min_deg = parse_double(key, value);
    } else if (key == "affine.rotation_max_deg") {
        cfg.ranges.rotation_max_deg = parse_double(key, value);
    } else if (key == "affine.scale_min") {
        cfg.ranges.scale_min = parse_double(key, value);
    } else if (key == "affine.scale_max") {
        cfg.ranges.scale_max = parse_double(key, value);
    } else if (key == "affine.shear_min_deg") {
        cfg.ranges.shear_min_deg = parse_double(key, value);
    } else if (key == "affine.shear_max_deg") {
        cfg.ranges.shear_max_deg = parse_double(key, value);
    } else if (key == "affine.translate_min") {
        cfg.ranges.translate_min = parse_double(key, value);
    } else if (key == "affine.translate_max") {
        cfg.ranges.translate_max = parse_double(key, value);
    } else {
        throw ConfigError("unknown config key: " + key);
    }
}

}  // namespace

ImageSample load_image(const std::string& path, const std::string& mask_suffix) {
    const ImageU8 raw = read_image(path);
    ImageSample s;
    const fs::path p(path);
    s.id = p.stem().string();
    s.source_path = path;
    s.h = raw.h;
    s.w = raw.w;
    s.channels = raw.channels;
    s.pixels.resize(raw.pixels.size());
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
        s.pixels[i] = static_cast<double>(raw.pixels[i]) / 255.0;
    }

    if (!mask_suffix.empty()) {
        const fs::path dir = p.parent_path();
        const std::string stem = s.id + mask_suffix;
        fs::path mask_path;
        // Same extension as the image first, then the other supported ones.
        std::vector<std::string> exts = {p.extension().string()};
        for (const char* e : kMaskExtensions) {
            if (e != exts[0]) {
                exts.push_back(e);
            }
        }
        for (const std::string& e : exts) {
            fs::path candidate = dir / (stem + e);
            std::error_code ec;
            if (fs::is_regular_file(candidate, ec)) {
                mask_path = candidate;
                break;
            }
        }
        if (!mask_path.empty()) {
            Mask gt = load_mask(mask_path.string());
            if (gt.h != raw.h || gt.w != raw.w) {
                throw IoError("mask size " + std::to_string(gt.h) + "x" + std::to_string(gt.w) +
                              " does not match image " + std::to_string(raw.h) + "x" +
                              std::to_string(raw.w) + ": " + mask_path.string());
            }
            s.gt = std::move(gt);
        }
    }
    return s;
}

Mask load_mask(const std::string& path) {
    const ImageU8 m = read_image(path);
    Mask mask(m.h, m.w);
    for (std::int64_t r = 0; r < m.h; ++r) {
        for (std::int64_t c = 0; c < m.w; ++c) {
            double mean = 0.0;
            for (std::int64_t ch = 0; ch < m.channels; ++ch) {
                mean += static_cast<double>(m.at(r, c, ch));
            }
            mean /= static_cast<double>(m.channels) * 255.0;
            mask.set(r, c, mean >= 0.5);
        }
    }
    return mask;
}

Tensor preprocess(const ImageSample& sample) {
    if (sample.channels != 1 && sample.channels != 3) {
        throw ShapeError("preprocess: channels must be 1 or 3");
    }
    if (sample.h < 1 || sample.w < 1 ||
        sample.pixels.size() !=
            static_cast<std::size_t>(sample.h * sample.w * sample.channels)) {
        throw ShapeError("preprocess: inconsistent sample buffer");
    }
    Tensor x = Tensor::zeros({1, sample.channels, sample.h, sample.w});
    std::vector<double>& out = x.values();
    const std::int64_t n = sample.h * sample.w;
    for (std::int64_t ch = 0; ch < sample.channels; ++ch) {
        double mean = 0.0;
        for (std::int64_t r = 0; r < sample.h; ++r) {
            for (std::int64_t c = 0; c < sample.w; ++c) {
                mean += sample.at(r, c, ch);
            }
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t r = 0; r < sample.h; ++r) {
            for (std::int64_t c = 0; c < sample.w; ++c) {
                const double d = sample.at(r, c, ch) - mean;
                var += d * d;
            }
        }
        var /= static_cast<double>(n);
        const double denom = std::sqrt(var) + 1e-8;
        for (std::int64_t r = 0; r < sample.h; ++r) {
            for (std::int64_t c = 0; c < sample.w; ++c) {
                out[static_cast<std::size_t>((ch * sample.h + r) * sample.w + c)] =
                    (sample.at(r, c, ch) - mean) / denom;
            }
        }
    }
    return x;
}

void RunConfig::validate() const {
    if (preset != "skin" && preset != "lung" && preset != "custom") {
        throw ConfigError("preset must be skin, lung, or custom: " + preset);
    }
    if (out_dir.empty()) {
        throw ConfigError("out_dir must not be empty");
    }
    if (jobs < 1) {
        throw ConfigError("jobs must be >= 1");
    }
    model.validate();
    optim.validate();
    weights.validate();
    ranges.validate();
}

std::string RunConfig::serialize() const {
    std::string out;
    auto kv = [&out](const std::string& k, const std::string& v) {
        out += k;
        out += " = ";
        out += v;
        out += '\n';
    };
    out += "# run configuration\n";
    kv("preset", preset);
    kv("seed", fmt_u64(seed));
    kv("out_dir", out_dir);
    kv("mask_suffix", mask_suffix);
    kv("jobs", fmt_i64(jobs));
    kv("model.in_channels", fmt_i64(model.in_channels));
    kv("model.channels", fmt_i64(model.channels));
    kv("model.blocks", fmt_i64(model.blocks));
    kv("model.clusters", fmt_i64(model.clusters));
    kv("model.dilation", fmt_i64(model.lka.dilation));
    kv("model.k_lka", fmt_i64(model.lka.k_lka));
    kv("model.r_set", serialize_i64_list(model.lka.r_set));
    kv("model.deform_kernel", fmt_i64(model.deform_kernel));
    kv("optim.lr", fmt_double(optim.lr));
    kv("optim.momentum", fmt_double(optim.momentum));
    kv("optim.max_iterations", fmt_i64(optim.max_iterations));
    kv("optim.min_cluster_stop", fmt_i64(optim.min_cluster_stop));
    kv("loss.lambda1", fmt_double(weights.lambda1));
    kv("loss.lambda2", fmt_double(weights.lambda2));
    kv("loss.lambda3", fmt_double(weights.lambda3));
    kv("affine.rotation_min_deg", fmt_double(ranges.rotation_min_deg));
    kv("affine.rotation_max_deg", fmt_double(ranges.rotation_max_deg));
    kv("affine.scale_min", fmt_double(ranges.scale_min));
    kv("affine.scale_max", fmt_double(ranges.scale_max));
    kv("affine.shear_min_deg", fmt_double(ranges.shear_min_deg));
    kv("affine.shear_max_deg", fmt_double(ranges.shear_max_deg));
    kv("affine.translate_min", fmt_double(ranges.translate_min));
    kv("affine.translate_max", fmt_double(ranges.translate_max));
    return out;
}

std::vector<ConfigEntry> parse_config_text(const std::string& text) {
    std::vector<ConfigEntry> entries;
    std::stringstream ss(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = strip(line);
        if (line.empty()) {
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              " is not a key = value assignment: " + line);
        }
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("config line " + std::to_string(line_no) + " has an empty key");
        }
        entries.emplace_back(key, value);
    }
    return entries;
}

std::vector<ConfigEntry> load_config_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open config file: " + path);
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

RunConfig resolve_config(const std::vector<ConfigEntry>& file_entries,
                         const std::vector<ConfigEntry>& cli_entries,
                         const char* env_seed) {
    RunConfig cfg;
    // The preset named last (CLI beats file) seeds the loss weights, so
    // explicit lambda keys override it regardless of their position.
    for (const auto& layer : {file_entries, cli_entries}) {
        for (const auto& [key, value] : layer) {
            if (key == "preset") {
                cfg.preset = value;
            }
        }
    }
    if (cfg.preset == "skin") {
        cfg.weights = LossWeights::skin();
    } else if (cfg.preset == "lung") {
        cfg.weights = LossWeights::lung();
    } else if (cfg.preset != "custom") {
        throw ConfigError("preset must be skin, lung, or custom: " + cfg.preset);
    }

    bool seed_set = false;
    for (const auto& layer : {file_entries, cli_entries}) {
        for (const auto& [key, value] : layer) {
            if (key == "preset") {
                continue;
            }
            apply_entry(cfg, key, value);
            if (key == "seed") {
                seed_set = true;
            }
        }
    }
    if (!seed_set && env_seed != nullptr) {
        cfg.seed = parse_u64("S3SEG_SEED", env_seed);
    }
    // Sub-seeds derive from the run seed; run_batch re-derives them per image.
    cfg.model.seed = cfg.seed;
    cfg.optim.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

std::uint64_t config_hash(const RunConfig& cfg) {
    // Placement knobs are excluded: runs that differ only in where artifacts
    // land or how many workers executed are the same configuration.
    std::istringstream lines(cfg.serialize());
    std::uint64_t h = 1469598103934665603ull;
    std::string line;
    while (std::getline(lines, line)) {
        if (line.rfind("out_dir = ", 0) == 0 || line.rfind("jobs = ", 0) == 0) {
            continue;
        }
        line += '\n';
        for (unsigned char c : line) {
            h ^= c;
            h *= 1099511628211ull;
        }
    }
    return h;
}

namespace {

std::vector<fs::path> collect_inputs(const RunConfig& cfg, const std::string& input_path) {
    std::error_code ec;
    if (fs::is_regular_file(input_path, ec)) {
        return {fs::path(input_path)};
    }
    if (!fs::is_directory(input_path, ec)) {
        throw IoError("input path is neither a file nor a directory: " + input_path);
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(input_path)) {
        if (!entry.is_regular_file()) {
            continue;
        }
        const fs::path& p = entry.path();
        if (!supported_extension(p.extension().string())) {
            continue;
        }
        const std::string stem = p.stem().string();
        if (!cfg.mask_suffix.empty() && stem.size() > cfg.mask_suffix.size() &&
            stem.compare(stem.size() - cfg.mask_suffix.size(), cfg.mask_suffix.size(),
                         cfg.mask_suffix) == 0) {
            continue;  // mask sidecar, not an input
        }
        files.push_back(p);
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    if (files.empty()) {
        throw IoError("no input images found in " + input_path);
    }
    return files;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot open file for writing: " + path);
    }
    os << text;
    if (!os) {
        throw IoError("write failed: " + path);
    }
}

}  // namespace

BatchResult run_batch(const RunConfig& cfg, const std::string& input_path) {
    cfg.validate();
    const std::vector<fs::path> inputs = collect_inputs(cfg, input_path);
    fs::create_directories(cfg.out_dir);

    const std::size_t n = inputs.size();
    BatchResult result;
    result.items.resize(n);
    std::vector<ImageMetrics> row_slots(n);
    std::vector<std::uint8_t> row_present(n, 0);

    auto process = [&](std::size_t i) {
        BatchItem& item = result.items[i];
        item.source_path = inputs[i].string();
        item.id = inputs[i].stem().string();
        try {
            const ImageSample sample = load_image(item.source_path, cfg.mask_suffix);
            ModelConfig mcfg = cfg.model;
            mcfg.in_channels = sample.channels;
            mcfg.seed = cfg.seed + i;
            OptimConfig ocfg = cfg.optim;
            ocfg.seed = cfg.seed + i;
            if (sample.h < mcfg.min_extent() || sample.w < mcfg.min_extent()) {
                throw ShapeError("image " + item.id + " is " + std::to_string(sample.h) + "x" +
                                 std::to_string(sample.w) +
                                 ", smaller than the model receptive extent " +
                                 std::to_string(mcfg.min_extent()));
            }
            const Tensor x = preprocess(sample);
            const TrainResult trained =
                train_single_image(x, mcfg, ocfg, cfg.weights, cfg.ranges);
            item.counters = trained.counters;
            item.labels_path = (fs::path(cfg.out_dir) / (item.id + "_labels.png")).string();
            item.history_path = (fs::path(cfg.out_dir) / (item.id + "_history.csv")).string();
            write_label_png(item.labels_path, trained.labels);
            write_text_file(item.history_path, trained.history.csv());
            if (sample.gt.has_value()) {
                ImageMetrics m = evaluate_labels(trained.labels, *sample.gt);
                m.id = item.id;
                row_slots[i] = std::move(m);
                row_present[i] = 1;
                item.evaluated = true;
            }
            item.ok = true;
        } catch (const Error& e) {
            item.ok = false;
            item.error = e.what();
        }
    };

    const std::size_t jobs =
        std::min<std::size_t>(static_cast<std::size_t>(cfg.jobs), n);
    if (jobs <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            process(i);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        workers.reserve(jobs);
        for (std::size_t t = 0; t < jobs; ++t) {
            workers.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                    process(i);
                }
            });
        }
        for (std::thread& w : workers) {
            w.join();
        }
    }

    std::vector<ImageMetrics> rows;
    for (std::size_t i = 0; i < n; ++i) {
        if (row_present[i]) {
            rows.push_back(row_slots[i]);
            ++result.evaluated_count;
        }
        if (!result.items[i].ok) {
            ++result.failed_count;
        }
    }

    std::string metrics_text;
    if (!rows.empty()) {
        result.report = aggregate(std::move(rows), config_hash(cfg), cfg.seed);
        metrics_text += result.report.machine_records();
    } else {
        metrics_text += "no ground truth masks; evaluation skipped\n";
    }
    for (const BatchItem& item : result.items) {
        if (!item.ok) {
            metrics_text += "failed image=" + item.id + " error=" + item.error + "\n";
        }
    }
    result.metrics_path = (fs::path(cfg.out_dir) / "metrics.txt").string();
    write_text_file(result.metrics_path, metrics_text);
    return result;
}

}  // namespace s3seg
