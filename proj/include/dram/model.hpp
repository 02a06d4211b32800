#pragma once

// ResNet-style 3D encoder, two-stage reconstruction network, and the
// classification / regression output heads.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dram/ops3d.hpp"
#include "dram/resample.hpp"
#include "dram/rng.hpp"
#include "dram/tensor.hpp"
#include "dram/volio.hpp"

namespace dram {

enum class BackboneVariant { rn18, rn34, rn50 };
enum class HeadKind { classification, regression };

inline const char* to_string(BackboneVariant v) {
    switch (v) {
        case BackboneVariant::rn18: return "rn18";
        case BackboneVariant::rn34: return "rn34";
        case BackboneVariant::rn50: return "rn50";
    }
    return "?";
}
inline const char* to_string(HeadKind h) { return h == HeadKind::classification ? "classification" : "regression"; }

inline BackboneVariant parse_backbone(const std::string& s) {
    if (s == "rn18") return BackboneVariant::rn18;
    if (s == "rn34") return BackboneVariant::rn34;
    if (s == "rn50") return BackboneVariant::rn50;
    throw std::invalid_argument("unknown backbone '" + s + "' (expected rn18, rn34 or rn50)");
}
inline HeadKind parse_head(const std::string& s) {
    if (s == "classification" || s == "cls") return HeadKind::classification;
    if (s == "regression" || s == "reg") return HeadKind::regression;
    throw std::invalid_argument("unknown head '" + s + "' (expected cls or reg)");
}

struct ModelConfig {
    BackboneVariant backbone = BackboneVariant::rn18;
    std::int64_t base_channels = 8;
    Dims3 input_extents{32, 56, 72};
    HeadKind head = HeadKind::regression;
    int cle_classes = 6;
    int pse_classes = 3;
    std::uint64_t seed = 0;

    void validate() const {
        if (base_channels < 4) throw std::invalid_argument("model: base_channels must be >= 4");
        for (auto e : input_extents)
            if (e <= 0 || e % 8 != 0)
                throw std::invalid_argument("model: input extents must be positive multiples of 8, got " +
                                            std::to_string(input_extents[0]) + "x" + std::to_string(input_extents[1]) +
                                            "x" + std::to_string(input_extents[2]));
        if (cle_classes < 2 || pse_classes < 2) throw std::invalid_argument("model: need >= 2 classes per subtype");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"backbone", to_string(c.backbone)},
         {"base_channels", c.base_channels},
         {"input_extents", c.input_extents},
         {"head", to_string(c.head)},
         {"class_counts", {c.cle_classes, c.pse_classes}},
         {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    if (j.contains("backbone")) c.backbone = parse_backbone(j.at("backbone").get<std::string>());
    c.base_channels = j.value("base_channels", c.base_channels);
    if (j.contains("input_extents")) c.input_extents = j.at("input_extents").get<Dims3>();
    if (j.contains("head")) c.head = parse_head(j.at("head").get<std::string>());
    if (j.contains("class_counts")) {
        c.cle_classes = j.at("class_counts").at(0).get<int>();
        c.pse_classes = j.at("class_counts").at(1).get<int>();
    }
    c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Architecture plan: every parameterised layer with its geometry. Parameter
// and MAC accounting and the allocated model both derive from it.

enum class LayerKind { conv, batchnorm };

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::conv;
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t kernel = 1;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    bool bias = false;
    Dims3 out_extents{};

    std::int64_t params() const {
        if (kind == LayerKind::batchnorm) return 2 * out_channels;
        return kernel * kernel * kernel * in_channels * out_channels + (bias ? out_channels : 0);
    }
    std::int64_t macs() const {
        if (kind == LayerKind::batchnorm) return 0;
        return out_extents[0] * out_extents[1] * out_extents[2] * kernel * kernel * kernel * in_channels * out_channels;
    }
};

struct ArchitecturePlan {
    ModelConfig config;
    std::vector<LayerSpec> layers;
    std::int64_t backbone_channels = 0;
    std::int64_t stem_channels = 0;
    std::int64_t stage1_width = 0;
    std::int64_t dense_channels = 0;
    Dims3 stem_extents{}, pool_extents{}, backbone_extents{}, dense_extents{};
};

struct ParamMacCount {
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

inline ParamMacCount count_params_macs(const std::vector<LayerSpec>& layers) {
    ParamMacCount c;
    for (const auto& l : layers) {
        c.params += l.params();
        c.macs += l.macs();
    }
    return c;
}

namespace detail {

inline Dims3 conv_extents(const Dims3& in, std::int64_t k, std::int64_t s, std::int64_t p) {
    Dims3 out;
    for (int a = 0; a < 3; ++a) out[a] = (in[a] + 2 * p - k) / s + 1;
    return out;
}

struct PlanBuilder {
    std::vector<LayerSpec>& layers;
    Dims3 extents;

    void conv(const std::string& name, std::int64_t ci, std::int64_t co, std::int64_t k, std::int64_t s, bool bias = false) {
        const std::int64_t p = k / 2;
        extents = conv_extents(extents, k, s, p);
        layers.push_back({name, LayerKind::conv, ci, co, k, s, p, bias, extents});
    }
    void bn(const std::string& name, std::int64_t c) {
        layers.push_back({name, LayerKind::batchnorm, c, c, 1, 1, 0, false, extents});
    }
};

}  // namespace detail

inline std::vector<int> block_counts(BackboneVariant v) {
    if (v == BackboneVariant::rn18) return {2, 2, 2, 2};
    return {3, 4, 6, 3};
}

inline ArchitecturePlan plan_architecture(const ModelConfig& cfg) {
    cfg.validate();
    ArchitecturePlan plan;
    plan.config = cfg;
    const auto C = cfg.base_channels;
    detail::PlanBuilder b{plan.layers, cfg.input_extents};

    b.conv("stem.conv", 1, C, 7, 2);
    b.bn("stem.bn", C);
    plan.stem_extents = b.extents;
    plan.stem_channels = C;
    b.extents = detail::conv_extents(b.extents, 3, 2, 1);  // maxpool k3 s2 p1
    plan.pool_extents = b.extents;

    const bool bottleneck = cfg.backbone == BackboneVariant::rn50;
    const std::int64_t expansion = bottleneck ? 4 : 1;
    std::int64_t cin = C;
    const auto counts = block_counts(cfg.backbone);
    for (int li = 0; li < 4; ++li) {
        const std::int64_t planes = C << li;
        for (int bi = 0; bi < counts[static_cast<std::size_t>(li)]; ++bi) {
            const std::string p = "layer" + std::to_string(li + 1) + "." + std::to_string(bi) + ".";
            const std::int64_t stride = (li == 1 && bi == 0) ? 2 : 1;
            const Dims3 in_extents = b.extents;
            if (bottleneck) {
                b.conv(p + "conv1", cin, planes, 1, 1);
                b.bn(p + "bn1", planes);
                b.conv(p + "conv2", planes, planes, 3, stride);
                b.bn(p + "bn2", planes);
                b.conv(p + "conv3", planes, planes * 4, 1, 1);
                b.bn(p + "bn3", planes * 4);
            } else {
                b.conv(p + "conv1", cin, planes, 3, stride);
                b.bn(p + "bn1", planes);
                b.conv(p + "conv2", planes, planes, 3, 1);
                b.bn(p + "bn2", planes);
            }
            if (stride != 1 || cin != planes * expansion) {
                const Dims3 out = b.extents;
                b.extents = in_extents;
                b.conv(p + "downsample.conv", cin, planes * expansion, 1, stride);
                b.bn(p + "downsample.bn", planes * expansion);
                b.extents = out;
            }
            cin = planes * expansion;
        }
    }
    plan.backbone_extents = b.extents;
    plan.backbone_channels = cin;

    // Reconstruction: reduce width (1x1x1) -> upsample x2 -> concat skip ->
    // two 3x3x3 convs. Stage widths 4C then 2C.
    const std::int64_t w1 = 4 * C, w2 = 2 * C;
    plan.stage1_width = w1;
    b.conv("recon1.reduce.conv", cin, w1, 1, 1);
    b.bn("recon1.reduce.bn", w1);
    b.extents = plan.pool_extents;
    b.conv("recon1.conv1", w1 + C, w1, 3, 1);
    b.bn("recon1.bn1", w1);
    b.conv("recon1.conv2", w1, w1, 3, 1);
    b.bn("recon1.bn2", w1);
    b.conv("recon2.reduce.conv", w1, w2, 1, 1);
    b.bn("recon2.reduce.bn", w2);
    b.extents = plan.stem_extents;
    b.conv("recon2.conv1", w2 + C, w2, 3, 1);
    b.bn("recon2.bn1", w2);
    b.conv("recon2.conv2", w2, w2, 3, 1);
    b.bn("recon2.bn2", w2);
    plan.dense_extents = b.extents;
    plan.dense_channels = w2;

    if (cfg.head == HeadKind::classification) {
        b.conv("head.cle", w2, cfg.cle_classes, 1, 1, true);
        b.conv("head.pse", w2, cfg.pse_classes, 1, 1, true);
    } else {
        b.conv("head.cle", w2, 1, 1, 1, true);
        b.conv("head.pse", w2, 1, 1, 1, true);
    }
    return plan;
}

inline ParamMacCount count_params_macs(const ArchitecturePlan& plan) { return count_params_macs(plan.layers); }

// ---------------------------------------------------------------------------

// Trilinear resize then threshold at 0.5; [N,1,D,H,W] plain values.
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, const Dims3& extents) {
    if (mask.rank() != 5 || mask.dim(1) != 1) throw ShapeError("downsample_mask: expected [N,1,D,H,W]");
    std::vector<double> v(mask.values().begin(), mask.values().end());
    auto r = resample::trilinear(v, mask.dim(0), mask.dim(2), mask.dim(3), mask.dim(4), extents[0], extents[1],
                                 extents[2]);
    std::vector<T> out(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) out[i] = r[i] >= 0.5 ? T(1) : T(0);
    return Tensor<T>(Shape{mask.dim(0), 1, extents[0], extents[1], extents[2]}, std::move(out));
}

template <typename T>
struct ModelOutput {
    Tensor<T> backbone;  // [N, Cb, D/8, H/8, W/8]
    Tensor<T> dense;     // [N, Cd, D/2, H/2, W/2]
    // classification head
    Tensor<T> cam_cle, cam_pse;        // dense class activation maps [N,K,...]
    Tensor<T> logits_cle, logits_pse;  // [N,K]
    Tensor<T> probs_cle, probs_pse;    // [N,K]
    // regression head
    Tensor<T> map_cle, map_pse;  // dense regression activation maps [N,1,...]
    Tensor<T> p_cle, p_pse;      // [N,1]
    Tensor<T> mask_ds;           // lung mask at map resolution
};

template <typename T>
class Model {
   public:
    struct Layer {
        LayerSpec spec;
        Tensor<T> weight;  // conv weight or BN gamma
        Tensor<T> bias;    // conv bias or BN beta (undefined for bias-free convs)
        BatchNormState<T> state;
    };

    explicit Model(const ModelConfig& cfg) : plan_(plan_architecture(cfg)) {
        layers_.reserve(plan_.layers.size());
        for (std::size_t i = 0; i < plan_.layers.size(); ++i) {
            const auto& s = plan_.layers[i];
            Layer l;
            l.spec = s;
            if (s.kind == LayerKind::conv) {
                const std::int64_t fan_in = s.in_channels * s.kernel * s.kernel * s.kernel;
                std::vector<T> w(static_cast<std::size_t>(fan_in * s.out_channels));
                std::mt19937_64 rng(derive_seed(cfg.seed, i));
                std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
                for (auto& x : w) x = static_cast<T>(nd(rng));
                l.weight = Tensor<T>(Shape{s.out_channels, s.in_channels, s.kernel, s.kernel, s.kernel}, std::move(w), true);
                if (s.bias) l.bias = Tensor<T>(Shape{s.out_channels}, T(0), true);
            } else {
                l.weight = Tensor<T>(Shape{s.out_channels}, T(1), true);
                l.bias = Tensor<T>(Shape{s.out_channels}, T(0), true);
                l.state = BatchNormState<T>(s.out_channels);
            }
            index_[s.name] = i;
            layers_.push_back(std::move(l));
        }
    }

    const ModelConfig& config() const { return plan_.config; }
    const ArchitecturePlan& plan() const { return plan_; }
    std::vector<Layer>& layers() { return layers_; }
    const std::vector<Layer>& layers() const { return layers_; }
    Layer& layer(const std::string& name) { return layers_.at(index_.at(name)); }

    // Trainable tensors in plan order.
    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (const auto& l : layers_) {
            out.push_back(l.weight);
            if (l.bias.defined()) out.push_back(l.bias);
        }
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.zero_grad();
    }

    // image, lung_mask: [N,1,D,H,W] at the configured input extents. The
    // mask is only consulted by the regression head.
    ModelOutput<T> forward(const Tensor<T>& image, const Tensor<T>& lung_mask, bool training) {
        const auto& cfg = plan_.config;
        if (image.rank() != 5 || image.dim(1) != 1 || image.dim(2) != cfg.input_extents[0] ||
            image.dim(3) != cfg.input_extents[1] || image.dim(4) != cfg.input_extents[2])
            throw ShapeError("model: input " + to_string(image.shape()) + " does not match configured extents");
        training_ = training;
        ModelOutput<T> out;

        auto stem = relu(bn("stem.bn", conv("stem.conv", image)));
        auto x = maxpool3d(stem, 3, 2, 1);
        const auto pooled = x;
        const auto counts = block_counts(cfg.backbone);
        for (int li = 0; li < 4; ++li)
            for (int bi = 0; bi < counts[static_cast<std::size_t>(li)]; ++bi)
                x = block("layer" + std::to_string(li + 1) + "." + std::to_string(bi) + ".", x);
        out.backbone = x;

        auto r = relu(bn("recon1.reduce.bn", conv("recon1.reduce.conv", x)));
        r = trilinear_resize(r, plan_.pool_extents);
        r = concat(r, pooled, 1);
        r = relu(bn("recon1.bn1", conv("recon1.conv1", r)));
        r = relu(bn("recon1.bn2", conv("recon1.conv2", r)));
        r = relu(bn("recon2.reduce.bn", conv("recon2.reduce.conv", r)));
        r = trilinear_resize(r, plan_.stem_extents);
        r = concat(r, stem, 1);
        r = relu(bn("recon2.bn1", conv("recon2.conv1", r)));
        r = relu(bn("recon2.bn2", conv("recon2.conv2", r)));
        out.dense = r;

        if (cfg.head == HeadKind::classification) {
            out.cam_cle = conv("head.cle", r);
            out.cam_pse = conv("head.pse", r);
            out.logits_cle = global_avg_pool(out.cam_cle);
            out.logits_pse = global_avg_pool(out.cam_pse);
            out.probs_cle = softmax(out.logits_cle, 1);
            out.probs_pse = softmax(out.logits_pse, 1);
        } else {
            if (!lung_mask.defined() || lung_mask.shape() != image.shape())
                throw ShapeError("model: regression head needs a lung mask shaped like the image");
            out.mask_ds = downsample_mask(lung_mask, plan_.dense_extents);
            out.map_cle = sigmoid(conv("head.cle", r));
            out.map_pse = sigmoid(conv("head.pse", r));
            out.p_cle = masked_mean_pool(out.map_cle, out.mask_ds);
            out.p_pse = masked_mean_pool(out.map_pse, out.mask_ds);
        }
        return out;
    }

    BatchNormOptions bn_options;

   private:
    Tensor<T> conv(const std::string& name, const Tensor<T>& x) {
        auto& l = layer(name);
        auto y = conv3d(x, l.weight, l.spec.stride, l.spec.padding);
        if (l.bias.defined()) y = add_channel_bias(y, l.bias);
        return y;
    }
    Tensor<T> bn(const std::string& name, const Tensor<T>& x) {
        auto& l = layer(name);
        return batchnorm(x, l.weight, l.bias, l.state, training_, bn_options);
    }
    Tensor<T> block(const std::string& p, const Tensor<T>& x) {
        Tensor<T> y;
        if (plan_.config.backbone == BackboneVariant::rn50) {
            y = relu(bn(p + "bn1", conv(p + "conv1", x)));
            y = relu(bn(p + "bn2", conv(p + "conv2", y)));
            y = bn(p + "bn3", conv(p + "conv3", y));
        } else {
            y = relu(bn(p + "bn1", conv(p + "conv1", x)));
            y = bn(p + "bn2", conv(p + "conv2", y));
        }
        const auto shortcut = index_.count(p + "downsample.conv") ? bn(p + "downsample.bn", conv(p + "downsample.conv", x)) : x;
        return relu(add(y, shortcut));
    }

    ArchitecturePlan plan_;
    std::vector<Layer> layers_;
    std::map<std::string, std::size_t> index_;
    bool training_ = false;
};

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.json header (config + registry of name/shape/offset)
// and <stem>.bin payload of little-endian float64 values.

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline fs::path checkpoint_stem(const fs::path& p) {
    const auto ext = p.extension().string();
    if (ext == ".json" || ext == ".bin") return p.parent_path() / p.stem();
    return p;
}

template <typename T>
void save_checkpoint(const Model<T>& m, const fs::path& path, const nlohmann::json& extra = {}) {
    const auto stem = checkpoint_stem(path);
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    nlohmann::json registry = nlohmann::json::array();
    std::vector<double> payload;
    auto put = [&](const std::string& name, const Shape& shape, std::span<const T> v) {
        registry.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}});
        for (auto x : v) payload.push_back(static_cast<double>(x));
    };
    for (const auto& l : m.layers()) {
        const bool is_bn = l.spec.kind == LayerKind::batchnorm;
        put(l.spec.name + (is_bn ? ".gamma" : ".weight"), l.weight.shape(), l.weight.values());
        if (l.bias.defined()) put(l.spec.name + (is_bn ? ".beta" : ".bias"), l.bias.shape(), l.bias.values());
        if (is_bn) {
            const auto c = static_cast<std::int64_t>(l.state.running_mean.size());
            put(l.spec.name + ".running_mean", Shape{c}, l.state.running_mean);
            put(l.spec.name + ".running_var", Shape{c}, l.state.running_var);
        }
    }
    nlohmann::json header{{"format", "dram-checkpoint"},
                          {"version", 1},
                          {"dtype", "float64"},
                          {"config", m.config()},
                          {"values", payload.size()},
                          {"registry", registry}};
    if (!extra.is_null()) header["extra"] = extra;
    {
        std::ofstream out(fs::path(stem.string() + ".json"));
        if (!out) throw CheckpointError("cannot write checkpoint " + stem.string());
        out << header.dump(1) << '\n';
    }
    std::vector<char> bytes;
    detail::to_little_endian_bytes(payload, bytes);
    std::ofstream out(fs::path(stem.string() + ".bin"), std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline nlohmann::json read_checkpoint_header(const fs::path& path) {
    const auto hp = fs::path(checkpoint_stem(path).string() + ".json");
    std::ifstream in(hp);
    if (!in) throw CheckpointError("cannot open checkpoint " + hp.string());
    nlohmann::json h;
    try {
        in >> h;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(hp.string() + ": malformed header: " + e.what());
    }
    if (h.value("format", "") != "dram-checkpoint" || h.value("version", 0) != 1)
        throw CheckpointError(hp.string() + ": not a version-1 checkpoint");
    return h;
}

template <typename T>
Model<T> load_checkpoint(const fs::path& path) {
    const auto h = read_checkpoint_header(path);
    Model<T> m(h.at("config").get<ModelConfig>());
    const auto bp = fs::path(checkpoint_stem(path).string() + ".bin");
    std::ifstream in(bp, std::ios::binary | std::ios::ate);
    if (!in) throw CheckpointError("cannot open " + bp.string());
    const auto size = static_cast<std::size_t>(in.tellg());
    const auto n = h.at("values").get<std::size_t>();
    if (size != n * sizeof(double)) throw CheckpointError(bp.string() + ": payload size mismatch");
    in.seekg(0);
    std::vector<char> bytes(size);
    in.read(bytes.data(), static_cast<std::streamsize>(size));
    std::vector<double> payload;
    detail::from_little_endian_bytes(bytes, payload);

    std::map<std::string, std::pair<Shape, std::size_t>> reg;
    for (const auto& e : h.at("registry"))
        reg[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()};
    auto take = [&](const std::string& name, const Shape& shape, std::span<T> dst) {
        const auto it = reg.find(name);
        if (it == reg.end()) throw CheckpointError("checkpoint lacks " + name);
        if (it->second.first != shape) throw CheckpointError("checkpoint shape mismatch for " + name);
        if (it->second.second + dst.size() > payload.size()) throw CheckpointError("checkpoint truncated at " + name);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(payload[it->second.second + i]);
    };
    for (auto& l : m.layers()) {
        const bool is_bn = l.spec.kind == LayerKind::batchnorm;
        take(l.spec.name + (is_bn ? ".gamma" : ".weight"), l.weight.shape(), l.weight.mutable_values());
        if (l.bias.defined()) take(l.spec.name + (is_bn ? ".beta" : ".bias"), l.bias.shape(), l.bias.mutable_values());
        if (is_bn) {
            const auto c = static_cast<std::int64_t>(l.state.running_mean.size());
            take(l.spec.name + ".running_mean", Shape{c}, l.state.running_mean);
            take(l.spec.name + ".running_var", Shape{c}, l.state.running_var);
        }
    }
    return m;
}

// Copies values between models of the same configuration (e.g. float <-> double).
template <typename To, typename From>
void copy_weights(Model<To>& dst, const Model<From>& src) {
    if (dst.layers().size() != src.layers().size()) throw std::invalid_argument("copy_weights: plans differ");
    for (std::size_t i = 0; i < dst.layers().size(); ++i) {
        auto& d = dst.layers()[i];
        const auto& s = src.layers()[i];
        auto cp = [](auto sv, auto dv) {
            for (std::size_t k = 0; k < dv.size(); ++k) dv[k] = static_cast<To>(sv[k]);
        };
        cp(s.weight.values(), d.weight.mutable_values());
        if (d.bias.defined()) cp(s.bias.values(), d.bias.mutable_values());
        for (std::size_t k = 0; k < d.state.running_mean.size(); ++k) {
            d.state.running_mean[k] = static_cast<To>(s.state.running_mean[k]);
            d.state.running_var[k] = static_cast<To>(s.state.running_var[k]);
        }
    }
}

// Published full-scale parameter counts (millions) for reference.
inline double reference_params_millions(BackboneVariant v) {
    switch (v) {
        case BackboneVariant::rn18: return 34.48;
        case BackboneVariant::rn34: return 64.79;
        case BackboneVariant::rn50: return 47.86;
    }
    return 0;
}

inline ModelConfig full_scale_config(BackboneVariant v, HeadKind head = HeadKind::regression) {
    ModelConfig c;
    c.backbone = v;
    c.base_channels = 64;
    c.input_extents = {128, 224, 288};
    c.head = head;
    return c;
}

}  // namespace dram
