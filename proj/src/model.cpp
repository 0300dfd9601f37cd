#include "s3seg/model.hpp"

#include <cstring>
#include <fstream>
#include <utility>

namespace s3seg {

namespace {

constexpr double kBnEps = 1e-5;
constexpr char kMagic[8] = {'S', '3', 'S', 'E', 'G', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

void require_odd_kernel(std::int64_t k, const char* what) {
    if (k < 1 || k % 2 == 0) {
        throw ConfigError(std::string(what) + " must be odd and >= 1, got " + std::to_string(k));
    }
}

}  // namespace

void LKAConfig::validate() const {
    if (channels < 1) {
        throw ConfigError("LKAConfig: channels must be >= 1");
    }
    if (dilation < 1) {
        throw ConfigError("LKAConfig: dilation must be >= 1");
    }
    if (k_lka < 1) {
        throw ConfigError("LKAConfig: k_lka must be >= 1");
    }
    require_odd_kernel(dw_kernel(), "LKAConfig: derived depthwise kernel");
    require_odd_kernel(dwd_kernel(), "LKAConfig: derived dilated kernel");
    if (r_set.empty()) {
        throw ConfigError("LKAConfig: r_set must not be empty");
    }
    std::int64_t prev = 0;
    for (std::int64_t r : r_set) {
        require_odd_kernel(r, "LKAConfig: r_set entry");
        if (r <= prev) {
            throw ConfigError("LKAConfig: r_set must be strictly increasing");
        }
        prev = r;
    }
}

void ModelConfig::validate() const {
    if (in_channels != 1 && in_channels != 3) {
        throw ConfigError("ModelConfig: in_channels must be 1 or 3");
    }
    if (channels < 8) {
        throw ConfigError("ModelConfig: channels must be >= 8");
    }
    if (blocks < 1) {
        throw ConfigError("ModelConfig: blocks must be >= 1");
    }
    if (clusters < 2) {
        throw ConfigError("ModelConfig: clusters must be >= 2");
    }
    lka.validate();
    if (lka.channels != channels) {
        throw ConfigError("ModelConfig: lka.channels must equal channels");
    }
    require_odd_kernel(deform_kernel, "ModelConfig: deform_kernel");
}

ModelParams ModelParams::init(const ModelConfig& cfg) {
    cfg.validate();
    // One seed draw per tensor, in declaration order, so the stream is stable
    // regardless of which tensors actually consume randomness.
    Rng seq(cfg.seed);
    auto make = [&seq](const Shape& shape, const Init& init) {
        Tensor t = Tensor::create(shape, init, seq.next_u64());
        t.set_requires_grad(true);
        return t;
    };

    const std::int64_t ci = cfg.in_channels;
    const std::int64_t c = cfg.channels;
    const std::int64_t k = cfg.deform_kernel;
    const std::int64_t kk = cfg.clusters;

    ModelParams p;
    p.cfg = cfg;
    p.stem_w = make({c, ci, 3, 3}, Init::kaiming_fan_in());
    p.stem_gamma = make({c}, Init::ones());
    p.stem_beta = make({c}, Init::zeros());
    p.blocks.reserve(static_cast<std::size_t>(cfg.blocks));
    for (std::int64_t b = 0; b < cfg.blocks; ++b) {
        BlockParams bp;
        bp.f_w = make({c, c, 1, 1}, Init::kaiming_fan_in());
        for (std::int64_t r : cfg.lka.r_set) {
            bp.inc_w.push_back(make({c, 1, r, r}, Init::kaiming_fan_in()));
        }
        const std::int64_t kd = cfg.lka.dwd_kernel();
        bp.dwd_w = make({c, 1, kd, kd}, Init::kaiming_fan_in());
        bp.attn_w = make({c, c, 1, 1}, Init::kaiming_fan_in());
        bp.post_w = make({c, c, 1, 1}, Init::kaiming_fan_in());
        bp.bn_gamma = make({c}, Init::ones());
        bp.bn_beta = make({c}, Init::zeros());
        p.blocks.push_back(std::move(bp));
    }
    p.offset_w = make({2 * k * k, c, k, k}, Init::zeros());
    p.deform_w = make({c, c, k, k}, Init::kaiming_fan_in());
    p.deform_gamma = make({c}, Init::ones());
    p.deform_beta = make({c}, Init::zeros());
    p.head_main_w = make({kk, c, 1, 1}, Init::kaiming_fan_in());
    p.head_main_b = make({kk}, Init::zeros());
    p.head_aux_w = make({kk, c, 1, 1}, Init::kaiming_fan_in());
    p.head_aux_b = make({kk}, Init::zeros());
    return p;
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("stem.conv.w", stem_w);
    fn("stem.bn.gamma", stem_gamma);
    fn("stem.bn.beta", stem_beta);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string pre = "block" + std::to_string(b) + ".";
        BlockParams& bp = blocks[b];
        fn(pre + "f.w", bp.f_w);
        for (std::size_t i = 0; i < bp.inc_w.size(); ++i) {
            fn(pre + "inc" + std::to_string(cfg.lka.r_set[i]) + ".w", bp.inc_w[i]);
        }
        fn(pre + "dwd.w", bp.dwd_w);
        fn(pre + "attn.w", bp.attn_w);
        fn(pre + "post.w", bp.post_w);
        fn(pre + "bn.gamma", bp.bn_gamma);
        fn(pre + "bn.beta", bp.bn_beta);
    }
    fn("deform.offset.w", offset_w);
    fn("deform.conv.w", deform_w);
    fn("deform.bn.gamma", deform_gamma);
    fn("deform.bn.beta", deform_beta);
    fn("head.main.w", head_main_w);
    fn("head.main.b", head_main_b);
    fn("head.aux.w", head_aux_w);
    fn("head.aux.b", head_aux_b);
}

Tensor ilka_block(const Tensor& x, const BlockParams& p, const LKAConfig& lka) {
    const std::int64_t c = lka.channels;
    const ConvSpec one{c, c, 1};
    Tensor f = conv2d(x, p.f_w, nullptr, one);
    Tensor inc = f;
    for (std::size_t i = 0; i < lka.r_set.size(); ++i) {
        const std::int64_t r = lka.r_set[i];
        const ConvSpec dw{c, c, r, 1, (r - 1) / 2, 1, c};
        inc = add(inc, depthwise_conv2d(f, p.inc_w[i], dw));
    }
    const std::int64_t kd = lka.dwd_kernel();
    const ConvSpec dwd{c, c, kd, 1, lka.dilation * (kd - 1) / 2, lka.dilation, c};
    Tensor attn = conv2d(depthwise_conv2d(inc, p.dwd_w, dwd), p.attn_w, nullptr, one);
    Tensor post = conv2d(add(mul(attn, f), x), p.post_w, nullptr, one);
    return relu(batchnorm2d(post, p.bn_gamma, p.bn_beta, kBnEps));
}

ForwardResult forward(const Tensor& image, const ModelParams& params) {
    const ModelConfig& cfg = params.cfg;
    if (image.rank() != 4 || image.extent(0) != 1 || image.extent(1) != cfg.in_channels) {
        throw ShapeError("forward: image must be [1," + std::to_string(cfg.in_channels) + ",H,W]");
    }
    const std::int64_t h = image.extent(2);
    const std::int64_t w = image.extent(3);
    const std::int64_t me = cfg.min_extent();
    if (h < me || w < me) {
        throw ShapeError("forward: input " + std::to_string(h) + "x" + std::to_string(w) +
                         " smaller than minimum extent " + std::to_string(me));
    }

    const std::int64_t c = cfg.channels;
    const ConvSpec stem{cfg.in_channels, c, 3, 1, 1};
    Tensor cur = relu(batchnorm2d(conv2d(image, params.stem_w, nullptr, stem), params.stem_gamma,
                                  params.stem_beta, kBnEps));
    for (const BlockParams& bp : params.blocks) {
        cur = ilka_block(cur, bp, cfg.lka);
    }

    const std::int64_t k = cfg.deform_kernel;
    const ConvSpec off{c, 2 * k * k, k, 1, (k - 1) / 2};
    Tensor offsets = conv2d(cur, params.offset_w, nullptr, off);
    const ConvSpec dspec{c, c, k, 1, (k - 1) / 2};
    Tensor feat = relu(batchnorm2d(deformable_conv2d(cur, offsets, params.deform_w, nullptr, dspec),
                                   params.deform_gamma, params.deform_beta, kBnEps));

    const ConvSpec head{c, cfg.clusters, 1};
    Tensor s = softmax_channels(conv2d(feat, params.head_main_w, &params.head_main_b, head));
    return {feat, s};
}

Tensor surrogate_forward(const Tensor& features, const SampleGrid& grid, const ModelParams& params) {
    Tensor warped = bilinear_sample(features, grid);
    const ConvSpec head{params.cfg.channels, params.cfg.clusters, 1};
    return softmax_channels(conv2d(warped, params.head_aux_w, &params.head_aux_b, head));
}

LabelMap argmax_labels(const Tensor& s) {
    if (s.rank() != 4 || s.extent(0) != 1) {
        throw ShapeError("argmax_labels: expected [1,K,H,W]");
    }
    const std::int64_t kk = s.extent(1);
    const std::int64_t h = s.extent(2);
    const std::int64_t w = s.extent(3);
    const std::vector<double>& v = s.values();
    LabelMap out(h, w);
    const std::int64_t plane = h * w;
    for (std::int64_t i = 0; i < plane; ++i) {
        std::int32_t best = 0;
        double bv = v[static_cast<std::size_t>(i)];
        for (std::int64_t ch = 1; ch < kk; ++ch) {
            const double cv = v[static_cast<std::size_t>(ch * plane + i)];
            if (cv > bv) {
                bv = cv;
                best = static_cast<std::int32_t>(ch);
            }
        }
        out.ids[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

std::int64_t attention_path_param_count(const LKAConfig& lka) {
    lka.validate();
    const std::int64_t c = lka.channels;
    std::int64_t total = 0;
    for (std::int64_t r : lka.r_set) {
        total += c * r * r;
    }
    const std::int64_t kd = lka.dwd_kernel();
    total += c * kd * kd;
    total += c * c;
    return total;
}

std::int64_t dense_conv_param_count(const LKAConfig& lka) {
    lka.validate();
    return lka.channels * lka.channels * lka.k_lka * lka.k_lka;
}

namespace {

void put_bytes(std::ostream& os, const unsigned char* b, std::size_t n) {
    os.write(reinterpret_cast<const char*>(b), static_cast<std::streamsize>(n));
}

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    }
    put_bytes(os, b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    }
    put_bytes(os, b, 8);
}

void put_i64(std::ostream& os, std::int64_t v) { put_u64(os, static_cast<std::uint64_t>(v)); }

void put_f32(std::ostream& os, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(os, u);
}

void get_bytes(std::istream& is, unsigned char* b, std::size_t n, const char* what) {
    is.read(reinterpret_cast<char*>(b), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
        throw IoError(std::string("checkpoint: truncated while reading ") + what);
    }
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    get_bytes(is, b, 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    }
    return v;
}

std::uint64_t get_u64(std::istream& is, const char* what) {
    unsigned char b[8];
    get_bytes(is, b, 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    }
    return v;
}

std::int64_t get_i64(std::istream& is, const char* what) {
    return static_cast<std::int64_t>(get_u64(is, what));
}

float get_f32(std::istream& is, const char* what) {
    const std::uint32_t u = get_u32(is, what);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace

void save_checkpoint(const std::string& path, ModelParams& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("checkpoint: cannot open for writing: " + path);
    }
    put_bytes(os, reinterpret_cast<const unsigned char*>(kMagic), 8);
    put_u32(os, kVersion);
    const ModelConfig& cfg = params.cfg;
    put_i64(os, cfg.in_channels);
    put_i64(os, cfg.channels);
    put_i64(os, cfg.blocks);
    put_i64(os, cfg.clusters);
    put_i64(os, cfg.lka.channels);
    put_i64(os, cfg.lka.dilation);
    put_i64(os, cfg.lka.k_lka);
    put_u32(os, static_cast<std::uint32_t>(cfg.lka.r_set.size()));
    for (std::int64_t r : cfg.lka.r_set) {
        put_i64(os, r);
    }
    put_i64(os, cfg.deform_kernel);
    put_u64(os, cfg.seed);

    params.for_each([&os](const std::string& name, Tensor& t) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        put_bytes(os, reinterpret_cast<const unsigned char*>(name.data()), name.size());
        put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::int64_t d = 0; d < t.rank(); ++d) {
            put_i64(os, t.extent(d));
        }
        for (double v : t.values()) {
            put_f32(os, static_cast<float>(v));
        }
    });
    os.flush();
    if (!os) {
        throw IoError("checkpoint: write failed: " + path);
    }
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("checkpoint: cannot open for reading: " + path);
    }
    char magic[8];
    get_bytes(is, reinterpret_cast<unsigned char*>(magic), 8, "magic");
    if (std::memcmp(magic, kMagic, 8) != 0) {
        throw IoError("checkpoint: bad magic: " + path);
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != kVersion) {
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    }
    ModelConfig cfg;
    cfg.in_channels = get_i64(is, "in_channels");
    cfg.channels = get_i64(is, "channels");
    cfg.blocks = get_i64(is, "blocks");
    cfg.clusters = get_i64(is, "clusters");
    cfg.lka.channels = get_i64(is, "lka.channels");
    cfg.lka.dilation = get_i64(is, "lka.dilation");
    cfg.lka.k_lka = get_i64(is, "lka.k_lka");
    const std::uint32_t nr = get_u32(is, "r_set size");
    cfg.lka.r_set.clear();
    for (std::uint32_t i = 0; i < nr; ++i) {
        cfg.lka.r_set.push_back(get_i64(is, "r_set entry"));
    }
    cfg.deform_kernel = get_i64(is, "deform_kernel");
    cfg.seed = get_u64(is, "seed");
    cfg.validate();

    ModelParams p = ModelParams::init(cfg);
    p.for_each([&is](const std::string& name, Tensor& t) {
        const std::uint32_t len = get_u32(is, "tensor name length");
        std::string got(len, '\0');
        get_bytes(is, reinterpret_cast<unsigned char*>(got.data()), len, "tensor name");
        if (got != name) {
            throw IoError("checkpoint: tensor name mismatch, expected " + name + ", got " + got);
        }
        const std::uint32_t rank = get_u32(is, "tensor rank");
        if (rank != static_cast<std::uint32_t>(t.rank())) {
            throw IoError("checkpoint: rank mismatch for " + name);
        }
        for (std::int64_t d = 0; d < t.rank(); ++d) {
            if (get_i64(is, "tensor extent") != t.extent(d)) {
                throw IoError("checkpoint: extent mismatch for " + name);
            }
        }
        std::vector<double>& v = t.values();
        for (double& x : v) {
            x = static_cast<double>(get_f32(is, "tensor values"));
        }
    });
    if (is.peek() != std::char_traits<char>::eof()) {
        throw IoError("checkpoint: trailing bytes: " + path);
    }
    return p;
}

}  // namespace s3seg
