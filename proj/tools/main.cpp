#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "s3seg/gradcheck.hpp"
#include "s3seg/image_io.hpp"
#include "s3seg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace s3seg;

namespace {

std::string fmt4(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
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

struct SegmentArgs {
    std::string input;
    std::string config_path;
    std::string mask_suffix;
    std::string preset;
    std::uint64_t seed = 0;
    std::int64_t jobs = 1;
    std::string out_dir;
};

int run_segment(const CLI::App* cmd, const SegmentArgs& args) {
    std::vector<ConfigEntry> cli;
    if (cmd->count("--mask-suffix") > 0) {
        cli.emplace_back("mask_suffix", args.mask_suffix);
    }
    if (cmd->count("--preset") > 0) {
        cli.emplace_back("preset", args.preset);
    }
    if (cmd->count("--seed") > 0) {
        cli.emplace_back("seed", std::to_string(args.seed));
    }
    if (cmd->count("--jobs") > 0) {
        cli.emplace_back("jobs", std::to_string(args.jobs));
    }
    cli.emplace_back("out_dir", args.out_dir);

    const RunConfig cfg = resolve_config(load_config_file(args.config_path), cli,
                                         std::getenv("S3SEG_SEED"));
    const BatchResult res = run_batch(cfg, args.input);

    std::cout << res.items.size() << " image(s), " << res.evaluated_count << " evaluated, "
              << res.failed_count << " failed\n";
    for (const BatchItem& item : res.items) {
        if (!item.ok) {
            std::cout << "failed " << item.id << ": " << item.error << "\n";
        }
    }
    if (res.evaluated_count > 0) {
        std::cout << res.report.table();
    }
    std::cout << "artifacts in " << cfg.out_dir << "\n";
    return res.all_ok() ? 0 : 1;
}

struct AblateArgs {
    std::string input;
    std::string config_path;
    std::string out_dir;
};

int run_ablate(const AblateArgs& args) {
    const RunConfig cfg = resolve_config(load_config_file(args.config_path),
                                         {{"out_dir", args.out_dir}},
                                         std::getenv("S3SEG_SEED"));
    const ImageSample sample = load_image(args.input, cfg.mask_suffix);
    const Tensor x = preprocess(sample);
    ModelConfig mcfg = cfg.model;
    mcfg.in_channels = sample.channels;
    mcfg.seed = cfg.seed;
    OptimConfig ocfg = cfg.optim;
    ocfg.seed = cfg.seed;

    const std::vector<AblationRow> rows =
        run_ablation(x, sample.gt.has_value() ? &*sample.gt : nullptr, mcfg, ocfg,
                     cfg.weights, cfg.ranges);

    fs::create_directories(cfg.out_dir);
    std::string record;
    std::cout << "config  lambda1  lambda2  lambda3  surrogate  sobel";
    if (sample.gt.has_value()) {
        std::cout << "  dsc";
    }
    std::cout << "\n";
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const AblationRow& row = rows[k];
        const std::string labels_path =
            (fs::path(cfg.out_dir) / (sample.id + "_ablation" + std::to_string(k) +
                                      "_labels.png"))
                .string();
        write_label_png(labels_path, row.labels);

        record += "config k=" + std::to_string(k) +
                  " lambda1=" + fmt_full(row.weights.lambda1) +
                  " lambda2=" + fmt_full(row.weights.lambda2) +
                  " lambda3=" + fmt_full(row.weights.lambda3) +
                  " surrogate_passes=" + std::to_string(row.counters.surrogate_passes) +
                  " sobel_passes=" + std::to_string(row.counters.sobel_passes) +
                  " iterations=" + std::to_string(row.counters.iterations);
        if (row.has_metrics) {
            record += " cluster=" + std::to_string(row.metrics.chosen_cluster) +
                      " dsc=" + fmt_full(row.metrics.dsc) +
                      " xor=" + fmt_full(row.metrics.xor_pct) +
                      " hm=" + (row.metrics.hm_valid ? fmt_full(row.metrics.hm) : "na");
        }
        record += "\n";

        char line[160];
        std::snprintf(line, sizeof(line), "%-7zu %-8s %-8s %-8s %-10lld %-5lld", k,
                      fmt4(row.weights.lambda1).c_str(), fmt4(row.weights.lambda2).c_str(),
                      fmt4(row.weights.lambda3).c_str(),
                      static_cast<long long>(row.counters.surrogate_passes),
                      static_cast<long long>(row.counters.sobel_passes));
        std::cout << line;
        if (row.has_metrics) {
            std::cout << " " << fmt4(row.metrics.dsc);
        }
        std::cout << "\n";
    }
    const std::string record_path =
        (fs::path(cfg.out_dir) / (sample.id + "_ablation.txt")).string();
    write_text_file(record_path, record);
    std::cout << "artifacts in " << cfg.out_dir << "\n";
    return 0;
}

struct EvalArgs {
    std::string pred_dir;
    std::string gt_dir;
    std::string out_path;
};

int run_eval(const EvalArgs& args) {
    std::vector<fs::path> preds;
    for (const auto& entry : fs::directory_iterator(args.pred_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") {
            preds.push_back(entry.path());
        }
    }
    std::sort(preds.begin(), preds.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    if (preds.empty()) {
        throw IoError("no prediction label maps found in " + args.pred_dir);
    }

    std::vector<ImageMetrics> rows;
    std::vector<std::string> failures;
    for (const fs::path& p : preds) {
        std::string id = p.stem().string();
        const std::string tag = "_labels";
        if (id.size() > tag.size() && id.compare(id.size() - tag.size(), tag.size(), tag) == 0) {
            id = id.substr(0, id.size() - tag.size());
        }
        try {
            fs::path gt_path;
            for (const std::string stem : {id, id + "_gt"}) {
                for (const char* ext : {".png", ".pgm", ".ppm", ".bmp"}) {
                    const fs::path candidate = fs::path(args.gt_dir) / (stem + ext);
                    std::error_code ec;
                    if (fs::is_regular_file(candidate, ec)) {
                        gt_path = candidate;
                        break;
                    }
                }
                if (!gt_path.empty()) {
                    break;
                }
            }
            if (gt_path.empty()) {
                throw IoError("no ground-truth mask for " + id + " in " + args.gt_dir);
            }
            const LabelMap labels = read_label_png(p.string());
            const Mask gt = load_mask(gt_path.string());
            if (gt.h != labels.h || gt.w != labels.w) {
                throw EvalError("mask size does not match prediction for " + id);
            }
            ImageMetrics m = evaluate_labels(labels, gt);
            m.id = id;
            rows.push_back(std::move(m));
        } catch (const Error& e) {
            failures.push_back("failed image=" + id + " error=" + e.what());
        }
    }

    std::string out;
    if (!rows.empty()) {
        const MetricsReport report = aggregate(rows, 0, 0);
        out += report.machine_records();
        std::cout << report.table();
    }
    for (const std::string& f : failures) {
        out += f + "\n";
        std::cout << f << "\n";
    }
    write_text_file(args.out_path, out);
    std::cout << "records in " << args.out_path << "\n";
    return failures.empty() && !rows.empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"per-image self-supervised segmentation"};
    app.require_subcommand(1);

    SegmentArgs seg_args;
    CLI::App* seg = app.add_subcommand(
        "segment", "train one model per input image and write label maps");
    seg->add_option("--input", seg_args.input, "image file or directory")->required();
    seg->add_option("--config", seg_args.config_path, "run configuration file")->required();
    seg->add_option("--mask-suffix", seg_args.mask_suffix,
                    "ground-truth sibling file suffix (default _gt)");
    seg->add_option("--preset", seg_args.preset, "loss-weight preset")
        ->check(CLI::IsMember({"skin", "lung", "custom"}));
    seg->add_option("--seed", seg_args.seed, "batch seed (overrides config and S3SEG_SEED)");
    seg->add_option("--jobs", seg_args.jobs, "parallel per-image trainers");
    seg->add_option("--out", seg_args.out_dir, "output directory")->required();

    AblateArgs abl_args;
    CLI::App* abl = app.add_subcommand(
        "ablate", "train the four loss configurations on one image");
    abl->add_option("--input", abl_args.input, "image file")->required();
    abl->add_option("--config", abl_args.config_path, "run configuration file")->required();
    abl->add_option("--out", abl_args.out_dir, "output directory")->required();

    EvalArgs eval_args;
    CLI::App* ev = app.add_subcommand(
        "eval", "score label maps against ground-truth masks");
    ev->add_option("--pred", eval_args.pred_dir, "directory of label-map PNGs")->required();
    ev->add_option("--gt", eval_args.gt_dir,
                   "directory of masks named <id>.<ext> or <id>_gt.<ext>")
        ->required();
    ev->add_option("--out", eval_args.out_path, "metrics record file")->required();

    CLI::App* gc = app.add_subcommand(
        "check-grads", "compare every operator against central finite differences");

    CLI11_PARSE(app, argc, argv);

    try {
        if (seg->parsed()) {
            return run_segment(seg, seg_args);
        }
        if (abl->parsed()) {
            return run_ablate(abl_args);
        }
        if (ev->parsed()) {
            return run_eval(eval_args);
        }
        if (gc->parsed()) {
            const GradCheckSummary summary = run_operator_suite();
            std::cout << summary.formatted();
            return summary.all_pass ? 0 : 1;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
