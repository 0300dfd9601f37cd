#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "s3seg/affine.hpp"
#include "s3seg/model.hpp"
#include "s3seg/nn_ops.hpp"

using namespace s3seg;

namespace {

constexpr double kBlockBnEps = 1e-5;

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.in_channels = 1;
    cfg.channels = 8;
    cfg.blocks = 1;
    cfg.clusters = 5;
    cfg.lka.channels = 8;
    cfg.lka.dilation = 2;
    cfg.lka.k_lka = 9;  // dwd = 5, minimum extent 9
    cfg.lka.r_set = {3};
    cfg.deform_kernel = 3;
    cfg.seed = 77;
    return cfg;
}

Tensor random_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
    return Tensor::create({1, 1, h, w}, Init::uniform(-1.0, 1.0), seed);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i) {
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    }
    return m;
}

std::vector<std::pair<std::string, std::vector<double>>> snapshot(ModelParams& p) {
    std::vector<std::pair<std::string, std::vector<double>>> out;
    p.for_each([&out](const std::string& name, Tensor& t) { out.emplace_back(name, t.values()); });
    return out;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/s3seg_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("lka config derives decomposition kernels") {
    LKAConfig lka;
    CHECK(lka.dw_kernel() == 5);
    CHECK(lka.dwd_kernel() == 7);
    lka.validate();

    LKAConfig small;
    small.channels = 8;
    small.dilation = 2;
    small.k_lka = 9;
    small.r_set = {3};
    CHECK(small.dw_kernel() == 3);
    CHECK(small.dwd_kernel() == 5);
    small.validate();
}

TEST_CASE("lka config validation rejects bad geometry") {
    LKAConfig lka;
    lka.k_lka = 12;  // dwd = 4, even
    CHECK_THROWS_AS(lka.validate(), ConfigError);

    lka = LKAConfig{};
    lka.dilation = 0;
    CHECK_THROWS_AS(lka.validate(), ConfigError);

    lka = LKAConfig{};
    lka.r_set = {};
    CHECK_THROWS_AS(lka.validate(), ConfigError);

    lka = LKAConfig{};
    lka.r_set = {4};
    CHECK_THROWS_AS(lka.validate(), ConfigError);

    lka = LKAConfig{};
    lka.r_set = {5, 3};
    CHECK_THROWS_AS(lka.validate(), ConfigError);

    lka = LKAConfig{};
    lka.channels = 0;
    CHECK_THROWS_AS(lka.validate(), ConfigError);
}

TEST_CASE("model config validation") {
    ModelConfig cfg = tiny_config();
    cfg.validate();

    cfg = tiny_config();
    cfg.in_channels = 2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_config();
    cfg.channels = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_config();
    cfg.blocks = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_config();
    cfg.clusters = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_config();
    cfg.lka.channels = 16;  // != cfg.channels
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_config();
    cfg.deform_kernel = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("attention path parameter accounting") {
    LKAConfig lka;  // C=64, k=21, d=3, r={3,5}
    CHECK(attention_path_param_count(lka) == 9408);
    CHECK(dense_conv_param_count(lka) == 1806336);
    CHECK(static_cast<double>(dense_conv_param_count(lka)) /
              static_cast<double>(attention_path_param_count(lka)) >
          190.0);

    // Growth is tied to the decomposed kernel areas, not k_lka^2: tripling
    // k_lka at fixed dilation must stay far below the dense count.
    LKAConfig wide = lka;
    wide.k_lka = 63;  // dwd = 21
    CHECK(attention_path_param_count(wide) == 64 * (9 + 25) + 64 * 441 + 64 * 64);
    CHECK(attention_path_param_count(wide) * 100 < dense_conv_param_count(wide));
}

TEST_CASE("parameter names follow the declaration order") {
    ModelConfig cfg;
    cfg.in_channels = 1;
    cfg.channels = 8;
    cfg.blocks = 2;
    cfg.clusters = 4;
    cfg.lka.channels = 8;
    cfg.lka.dilation = 3;
    cfg.lka.k_lka = 21;
    cfg.lka.r_set = {3, 5};
    ModelParams p = ModelParams::init(cfg);

    std::vector<std::string> names;
    p.for_each([&names](const std::string& n, Tensor&) { names.push_back(n); });
    const std::vector<std::string> expected = {
        "stem.conv.w",    "stem.bn.gamma",  "stem.bn.beta",   "block0.f.w",    "block0.inc3.w",
        "block0.inc5.w",  "block0.dwd.w",   "block0.attn.w",  "block0.post.w", "block0.bn.gamma",
        "block0.bn.beta", "block1.f.w",     "block1.inc3.w",  "block1.inc5.w", "block1.dwd.w",
        "block1.attn.w",  "block1.post.w",  "block1.bn.gamma", "block1.bn.beta",
        "deform.offset.w", "deform.conv.w", "deform.bn.gamma", "deform.bn.beta",
        "head.main.w",    "head.main.b",    "head.aux.w",     "head.aux.b"};
    CHECK(names == expected);
}

TEST_CASE("offset conv starts at exactly zero") {
    ModelParams p = ModelParams::init(tiny_config());
    for (double v : p.offset_w.values()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("forward preserves spatial size and softmax sums to one") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg);
    Tensor img = Tensor::create({1, 1, 9, 14}, Init::uniform(-1.0, 1.0), 5);
    ForwardResult r = forward(img, p);
    CHECK(r.features.shape() == Shape{1, 8, 9, 14});
    CHECK(r.s_main.shape() == Shape{1, 5, 9, 14});
    const std::vector<double>& s = r.s_main.values();
    const std::int64_t plane = 9 * 14;
    for (std::int64_t i = 0; i < plane; ++i) {
        double sum = 0.0;
        for (std::int64_t c = 0; c < 5; ++c) {
            sum += s[static_cast<std::size_t>(c * plane + i)];
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("forward rejects inputs below the minimum extent") {
    ModelConfig cfg = tiny_config();
    CHECK(cfg.min_extent() == 9);
    ModelParams p = ModelParams::init(cfg);
    CHECK_THROWS_AS(forward(random_image(8, 12, 3), p), ShapeError);
    CHECK_THROWS_AS(forward(random_image(12, 8, 3), p), ShapeError);
    CHECK_THROWS_AS(forward(Tensor::create({1, 3, 12, 12}, Init::uniform(0, 1), 3), p), ShapeError);
}

TEST_CASE("zeroed attention path reduces the block to conv-bn-relu") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg);
    BlockParams& bp = p.blocks[0];
    for (Tensor* t : {&bp.inc_w[0], &bp.dwd_w, &bp.attn_w}) {
        for (double& v : t->values()) {
            v = 0.0;
        }
    }
    Tensor x = Tensor::create({1, 8, 10, 10}, Init::uniform(-1.0, 1.0), 11);
    Tensor got = ilka_block(x, bp, cfg.lka);

    const ConvSpec one{8, 8, 1};
    Tensor want = relu(batchnorm2d(conv2d(x, bp.post_w, nullptr, one), bp.bn_gamma, bp.bn_beta,
                                   kBlockBnEps));
    CHECK(max_abs_diff(got, want) == 0.0);
}

TEST_CASE("zero offsets make the deformable stage a standard convolution") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg);  // offset conv is zero at init
    Tensor img = random_image(11, 11, 21);
    ForwardResult r = forward(img, p);

    const ConvSpec stem{1, 8, 3, 1, 1};
    Tensor cur = relu(batchnorm2d(conv2d(img, p.stem_w, nullptr, stem), p.stem_gamma, p.stem_beta,
                                  kBlockBnEps));
    cur = ilka_block(cur, p.blocks[0], cfg.lka);
    const ConvSpec dspec{8, 8, 3, 1, 1};
    Tensor want = relu(batchnorm2d(conv2d(cur, p.deform_w, nullptr, dspec), p.deform_gamma,
                                   p.deform_beta, kBlockBnEps));
    CHECK(max_abs_diff(r.features, want) < 1e-12);
}

TEST_CASE("initialization and forward are deterministic") {
    ModelConfig cfg = tiny_config();
    ModelParams a = ModelParams::init(cfg);
    ModelParams b = ModelParams::init(cfg);
    auto sa = snapshot(a);
    auto sb = snapshot(b);
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
        CHECK(sa[i].first == sb[i].first);
        CHECK(sa[i].second == sb[i].second);
    }

    Tensor img = random_image(10, 10, 9);
    Tensor s1 = forward(img, a).s_main;
    Tensor s2 = forward(img, b).s_main;
    CHECK(s1.values() == s2.values());
}

TEST_CASE("gradient of mean prediction wrt stem weights matches finite differences") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg);
    Tensor img = random_image(9, 9, 31);

    std::vector<double> analytic;
    {
        Tape tape;
        ForwardResult r = forward(img, p);
        Tensor loss = mean(r.s_main);
        tape.backward(loss);
        analytic = p.stem_w.grad();
    }

    auto eval = [&]() {
        ForwardResult r = forward(img, p);
        return mean(r.s_main).scalar();
    };
    const double h = 1e-5;
    const std::size_t probes[] = {0, 1, 3, 4, 6, 8};
    for (std::size_t idx : probes) {
        double& slot = p.stem_w.values()[idx];
        const double x0 = slot;
        slot = x0 + h;
        const double fp = eval();
        slot = x0 - h;
        const double fm = eval();
        slot = x0;
        const double fd = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[idx] - fd) /
                           std::max({std::abs(analytic[idx]), std::abs(fd), 1.0});
        CHECK(err < 1e-3);
    }
}

TEST_CASE("surrogate head on the identity grid matches the main head when cloned") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg);
    p.head_aux_w.values() = p.head_main_w.values();
    p.head_aux_b.values() = p.head_main_b.values();

    Tensor img = random_image(10, 12, 13);
    ForwardResult r = forward(img, p);
    GridWithMask g = affine_grid(AffineParams::identity(), 10, 12);
    Tensor s_aux = surrogate_forward(r.features, g.grid, p);
    CHECK(max_abs_diff(s_aux, r.s_main) < 1e-10);
}

TEST_CASE("surrogate softmax sums to one per pixel") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg);
    Tensor img = random_image(10, 10, 17);
    ForwardResult r = forward(img, p);
    AffineParams ap;
    ap.rotation_deg = 14.0;
    ap.scale = 1.1;
    ap.shear_deg = 4.0;
    ap.translate_x = 0.05;
    ap.translate_y = -0.05;
    GridWithMask g = affine_grid(ap, 10, 10);
    Tensor s_aux = surrogate_forward(r.features, g.grid, p);
    const std::vector<double>& s = s_aux.values();
    const std::int64_t plane = 100;
    for (std::int64_t i = 0; i < plane; ++i) {
        double sum = 0.0;
        for (std::int64_t c = 0; c < 5; ++c) {
            sum += s[static_cast<std::size_t>(c * plane + i)];
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("surrogate under a quarter turn equals the head on rotated features") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg);
    const std::int64_t n = 12;
    Tensor img = random_image(n, n, 19);
    ForwardResult r = forward(img, p);

    AffineParams ap;
    ap.rotation_deg = 90.0;
    GridWithMask g = affine_grid(ap, n, n);
    Tensor s_aux = surrogate_forward(r.features, g.grid, p);

    // Quarter-turn warp reads source (n-1-j, i) for output pixel (i, j).
    Tensor rot = Tensor::zeros({1, 8, n, n});
    for (std::int64_t c = 0; c < 8; ++c) {
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                rot.values()[static_cast<std::size_t>((c * n + i) * n + j)] =
                    r.features.values()[static_cast<std::size_t>((c * n + (n - 1 - j)) * n + i)];
            }
        }
    }
    const ConvSpec head{8, 5, 1};
    Tensor want = softmax_channels(conv2d(rot, p.head_aux_w, &p.head_aux_b, head));
    CHECK(max_abs_diff(s_aux, want) < 1e-10);
}

TEST_CASE("argmax labels pick the largest channel with smallest-id ties") {
    // K=3, 1x2: pixel 0 has a strict winner, pixel 1 ties channels 0 and 2.
    Tensor s = Tensor::from_values({1, 3, 1, 2}, {0.1, 0.4, 0.7, 0.4, 0.2, 0.2});
    LabelMap lm = argmax_labels(s);
    CHECK(lm.at(0, 0) == 1);
    CHECK(lm.at(0, 1) == 0);
    CHECK_THROWS_AS(argmax_labels(Tensor::zeros({2, 3, 1, 1})), ShapeError);
}

TEST_CASE("checkpoint round trip restores config and float32 values") {
    ModelConfig cfg = tiny_config();
    cfg.blocks = 2;
    cfg.seed = 1234;
    ModelParams p = ModelParams::init(cfg);
    TempFile f("ckpt.bin");
    save_checkpoint(f.path, p);

    ModelParams q = load_checkpoint(f.path);
    CHECK(q.cfg.in_channels == cfg.in_channels);
    CHECK(q.cfg.channels == cfg.channels);
    CHECK(q.cfg.blocks == cfg.blocks);
    CHECK(q.cfg.clusters == cfg.clusters);
    CHECK(q.cfg.lka.k_lka == cfg.lka.k_lka);
    CHECK(q.cfg.lka.r_set == cfg.lka.r_set);
    CHECK(q.cfg.deform_kernel == cfg.deform_kernel);
    CHECK(q.cfg.seed == cfg.seed);

    auto sp = snapshot(p);
    auto sq = snapshot(q);
    REQUIRE(sp.size() == sq.size());
    for (std::size_t i = 0; i < sp.size(); ++i) {
        CHECK(sp[i].first == sq[i].first);
        REQUIRE(sp[i].second.size() == sq[i].second.size());
        for (std::size_t j = 0; j < sp[i].second.size(); ++j) {
            // Storage is float32, so the loaded value is the rounded original.
            CHECK(sq[i].second[j] == static_cast<double>(static_cast<float>(sp[i].second[j])));
        }
    }

    TempFile f2("ckpt2.bin");
    save_checkpoint(f2.path, q);
    CHECK(read_file(f.path) == read_file(f2.path));
}

TEST_CASE("checkpoint loader rejects corrupt files") {
    ModelParams p = ModelParams::init(tiny_config());
    TempFile f("ckpt_bad.bin");
    save_checkpoint(f.path, p);

    std::string bytes = read_file(f.path);
    {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream os(f.path, std::ios::binary);
        os.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(f.path), IoError);

    {
        std::ofstream os(f.path, std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(f.path), IoError);

    {
        std::string padded = bytes + "zz";
        std::ofstream os(f.path, std::ios::binary);
        os.write(padded.data(), static_cast<std::streamsize>(padded.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(f.path), IoError);

    CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/ckpt.bin"), IoError);
}
