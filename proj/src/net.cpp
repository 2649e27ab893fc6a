#include "mpseg/net.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace mpseg {

using nlohmann::json;

std::string fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::Sp: return "sp";
        case FusionMode::MpAdd: return "mp-add";
        case FusionMode::Sam: return "sam";
    }
    throw std::logic_error("bad fusion mode");
}

FusionMode fusion_mode_from_name(const std::string& name) {
    if (name == "sp") return FusionMode::Sp;
    if (name == "mp-add") return FusionMode::MpAdd;
    if (name == "sam") return FusionMode::Sam;
    throw std::invalid_argument("unknown fusion mode '" + name + "' (expected sp|mp-add|sam)");
}

void NetworkConfig::validate() const {
    if (widths.size() != 5)
        throw std::invalid_argument("network config: expected 5 stage widths, got " + std::to_string(widths.size()));
    if (groups < 1) throw std::invalid_argument("network config: groups must be >= 1");
    for (int64_t w : widths) {
        if (w < 1) throw std::invalid_argument("network config: stage width must be >= 1");
        if (w % groups != 0)
            throw std::invalid_argument("network config: stage width " + std::to_string(w) +
                                        " not divisible by groups " + std::to_string(groups));
    }
    if (decision_width < 1) throw std::invalid_argument("network config: decision_width must be >= 1");
    if (in_channels < 1) throw std::invalid_argument("network config: in_channels must be >= 1");
}

static json config_to_json_obj(const NetworkConfig& c) {
    return json{{"widths", c.widths},         {"groups", c.groups},
                {"fusion", fusion_mode_name(c.fusion)}, {"urim", c.urim},
                {"decision_width", c.decision_width},   {"in_channels", c.in_channels}};
}

static NetworkConfig config_from_json_obj(const json& j) {
    NetworkConfig c;
    c.widths = j.at("widths").get<std::vector<int64_t>>();
    c.groups = j.at("groups").get<int64_t>();
    c.fusion = fusion_mode_from_name(j.at("fusion").get<std::string>());
    c.urim = j.at("urim").get<bool>();
    c.decision_width = j.at("decision_width").get<int64_t>();
    c.in_channels = j.at("in_channels").get<int64_t>();
    c.validate();
    return c;
}

std::string NetworkConfig::to_json() const { return config_to_json_obj(*this).dump(); }

NetworkConfig NetworkConfig::from_json(const std::string& text) { return config_from_json_obj(json::parse(text)); }

template <typename T>
int Network<T>::add_param(const std::string& name, Tensor<T> t) {
    names_.push_back(name);
    params_.push_back(std::move(t));
    return static_cast<int>(params_.size()) - 1;
}

template <typename T>
typename Network<T>::ConvRef Network<T>::add_conv(const std::string& name, int64_t cout, int64_t cin, int64_t k,
                                                  int64_t groups, Rng& rng) {
    ConvRef c;
    c.w = add_param(name + ".w", kaiming_conv_init<T>({cout, cin / groups, k, k}, rng));
    c.b = add_param(name + ".b", Tensor<T>({cout}));
    return c;
}

template <typename T>
typename Network<T>::BlockRef Network<T>::add_block(const std::string& name, int64_t cin, int64_t cout,
                                                    int64_t stride, int64_t groups, Rng& rng) {
    BlockRef blk;
    blk.groups = groups;
    blk.stride = stride;
    blk.conv1 = add_conv(name + ".conv1", cout, cin, 3, groups, rng);
    blk.conv2 = add_conv(name + ".conv2", cout, cout, 3, groups, rng);
    blk.has_proj = (cin != cout || stride != 1);
    if (blk.has_proj) blk.proj = add_conv(name + ".proj", cout, cin, 1, 1, rng);
    return blk;
}

template <typename T>
Network<T>::Network(NetworkConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    has_art_ = cfg_.fusion != FusionMode::Sp;
    has_sam_ = cfg_.fusion == FusionMode::Sam;

    auto add_stream = [&](const std::string& prefix, std::array<BlockRef, 5>& stages) {
        for (int i = 0; i < 5; ++i) {
            const int64_t cin = i == 0 ? cfg_.in_channels : cfg_.widths[static_cast<size_t>(i - 1)];
            const int64_t cout = cfg_.widths[static_cast<size_t>(i)];
            const int64_t stride = i == 0 ? 1 : 2;
            const int64_t groups = i == 0 ? 1 : cfg_.groups;
            stages[static_cast<size_t>(i)] = add_block(prefix + ".s" + std::to_string(i), cin, cout, stride, groups, rng);
        }
    };
    add_stream("pv", pv_stages_);
    if (has_art_) add_stream("art", art_stages_);

    if (has_sam_) {
        for (int i = 1; i <= 4; ++i) {
            const int64_t c = cfg_.widths[static_cast<size_t>(i)];
            SamRef s;
            s.channels = c;
            const std::string p = "sam.s" + std::to_string(i);
            s.c3 = add_conv(p + ".conv3", c, 4, 3, 1, rng);
            s.c5 = add_conv(p + ".conv5", c, 4, 5, 1, rng);
            s.c7 = add_conv(p + ".conv7", c, 4, 7, 1, rng);
            ConvRef fuse;
            fuse.w = add_param(p + ".fuse.w", kaiming_conv_init<T>({2 * c, 3 * c, 3, 3}, rng));
            fuse.b = add_param(p + ".fuse.b", Tensor<T>({2 * c}));
            s.fuse = fuse;
            sams_[static_cast<size_t>(i - 1)] = s;
        }
    }

    const int64_t cat_ch = cfg_.widths[1] + cfg_.widths[2] + cfg_.widths[3] + cfg_.widths[4];
    dec1_ = add_conv("dec.conv1", cfg_.decision_width, cat_ch, 3, 1, rng);
    dec2_ = add_conv("dec.conv2", cfg_.decision_width, cfg_.decision_width, 3, 1, rng);
    head_ = add_conv("dec.head", 2, cfg_.decision_width, 1, 1, rng);

    if (cfg_.urim) {
        for (int i = 0; i < 4; ++i)
            urim_.lc[static_cast<size_t>(i)] =
                add_conv("urim.lc" + std::to_string(i), cfg_.decision_width, cfg_.decision_width, 3, 1, rng);
        urim_.fuse = add_conv("urim.fuse", 2, 2 * cfg_.decision_width, 1, 1, rng);
    }
}

template <typename T>
void Network<T>::lift(Tape<T>& tape, bool needs_grad) {
    lifted_.clear();
    lifted_.reserve(params_.size());
    for (const auto& p : params_) lifted_.push_back(tape.input(p, needs_grad));
}

template <typename T>
Var Network<T>::conv(Tape<T>& tape, Var x, const ConvRef& c, Conv2dSpec spec) {
    return tape.conv2d(x, lifted_[static_cast<size_t>(c.w)], lifted_[static_cast<size_t>(c.b)], spec);
}

template <typename T>
Var Network<T>::block_forward(Tape<T>& tape, Var x, const BlockRef& blk) {
    Var h = tape.relu(conv(tape, x, blk.conv1, {blk.stride, 1, blk.groups}));
    h = conv(tape, h, blk.conv2, {1, 1, blk.groups});
    Var skip = blk.has_proj ? conv(tape, x, blk.proj, {blk.stride, 0, 1}) : x;
    return tape.relu(tape.add(h, skip));
}

template <typename T>
SamVars Network<T>::sam_vars(const SamRef& s) const {
    SamVars v;
    v.conv3_w = lifted_[static_cast<size_t>(s.c3.w)];
    v.conv3_b = lifted_[static_cast<size_t>(s.c3.b)];
    v.conv5_w = lifted_[static_cast<size_t>(s.c5.w)];
    v.conv5_b = lifted_[static_cast<size_t>(s.c5.b)];
    v.conv7_w = lifted_[static_cast<size_t>(s.c7.w)];
    v.conv7_b = lifted_[static_cast<size_t>(s.c7.b)];
    v.fuse_w = lifted_[static_cast<size_t>(s.fuse.w)];
    v.fuse_b = lifted_[static_cast<size_t>(s.fuse.b)];
    return v;
}

template <typename T>
UrimVars Network<T>::urim_vars() const {
    UrimVars v;
    for (size_t i = 0; i < 4; ++i) {
        v.lc_w[i] = lifted_[static_cast<size_t>(urim_.lc[i].w)];
        v.lc_b[i] = lifted_[static_cast<size_t>(urim_.lc[i].b)];
    }
    v.fuse_w = lifted_[static_cast<size_t>(urim_.fuse.w)];
    v.fuse_b = lifted_[static_cast<size_t>(urim_.fuse.b)];
    return v;
}

template <typename T>
std::array<Var, 4> Network<T>::encoder_forward(Tape<T>& tape, Var pv_in, Var art_in) {
    const auto& shape = tape.value(pv_in).shape;
    if (shape[2] % 16 != 0 || shape[3] % 16 != 0)
        throw std::invalid_argument("encoder: input resolution " + std::to_string(shape[2]) + "x" +
                                    std::to_string(shape[3]) + " not divisible by 16");
    if (shape[1] != cfg_.in_channels)
        throw std::invalid_argument("encoder: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                                    std::to_string(shape[1]));

    std::array<Var, 4> agg;
    if (cfg_.fusion == FusionMode::Sp) {
        Var f = block_forward(tape, pv_in, pv_stages_[0]);
        for (int i = 1; i <= 4; ++i) {
            f = block_forward(tape, f, pv_stages_[static_cast<size_t>(i)]);
            agg[static_cast<size_t>(i - 1)] = f;
        }
        return agg;
    }

    if (tape.value(pv_in).shape != tape.value(art_in).shape)
        throw std::invalid_argument("encoder: phase shapes differ, " + shape_str(tape.value(pv_in).shape) + " vs " +
                                    shape_str(tape.value(art_in).shape));
    Var f_pv = block_forward(tape, pv_in, pv_stages_[0]);
    Var f_art = block_forward(tape, art_in, art_stages_[0]);
    for (int i = 1; i <= 4; ++i) {
        f_pv = block_forward(tape, f_pv, pv_stages_[static_cast<size_t>(i)]);
        f_art = block_forward(tape, f_art, art_stages_[static_cast<size_t>(i)]);
        if (cfg_.fusion == FusionMode::MpAdd) {
            Var s = tape.add(f_pv, f_art);
            agg[static_cast<size_t>(i - 1)] = s;
            f_pv = s;  // the summed features feed both streams forward
            f_art = s;
        } else {
            SamOutputs out = sam_forward(tape, f_pv, f_art, sam_vars(sams_[static_cast<size_t>(i - 1)]),
                                         sams_[static_cast<size_t>(i - 1)].channels);
            agg[static_cast<size_t>(i - 1)] = out.aggregated;
            f_pv = out.mod_pv;
            f_art = out.mod_art;
        }
    }
    return agg;
}

template <typename T>
std::pair<Var, Var> Network<T>::decoder_forward(Tape<T>& tape, const std::array<Var, 4>& aggregated, int64_t out_h,
                                                int64_t out_w) {
    std::vector<Var> ups;
    ups.reserve(4);
    for (Var a : aggregated) ups.push_back(tape.bilinear_upsample(a, out_h, out_w));
    Var cat = tape.concat_channels(ups);
    Var d = tape.relu(conv(tape, cat, dec1_, {1, 1, 1}));
    d = tape.relu(conv(tape, d, dec2_, {1, 1, 1}));
    Var logits = conv(tape, d, head_, {1, 0, 1});
    Var s_init = tape.softmax(logits, 1);
    return {s_init, d};
}

template <typename T>
void Network<T>::set_lifted(const std::vector<Var>& vars) {
    if (vars.size() != params_.size())
        throw std::invalid_argument("set_lifted: got " + std::to_string(vars.size()) + " vars for " +
                                    std::to_string(params_.size()) + " parameters");
    lifted_ = vars;
}

template <typename T>
typename Network<T>::Forward Network<T>::forward(Tape<T>& tape, const Tensor<T>& pv, const Tensor<T>& art,
                                                 bool needs_grad) {
    lift(tape, needs_grad);
    return forward_lifted(tape, pv, art);
}

template <typename T>
typename Network<T>::Forward Network<T>::forward_lifted(Tape<T>& tape, const Tensor<T>& pv, const Tensor<T>& art) {
    Var pv_in = tape.input(pv, false);
    Var art_in = has_art_ ? tape.input(art, false) : Var{};
    Forward fw;
    fw.aggregated = encoder_forward(tape, pv_in, art_in);
    auto [s_init, decision] = decoder_forward(tape, fw.aggregated, pv.shape[2], pv.shape[3]);
    fw.s_init = s_init;
    fw.decision_features = decision;
    if (cfg_.urim) {
        UrimResult<T> r = urim_refine(tape, decision, s_init, urim_vars());
        fw.s_final = r.s_final;
        fw.confidence_trace = std::move(r.confidence_trace);
    } else {
        fw.s_final = fw.s_init;
    }
    return fw;
}

template <typename T>
Var Network<T>::total_loss(Tape<T>& tape, const Forward& fw, const Tensor<uint8_t>& target) {
    Var l_init = tape.cross_entropy(fw.s_init, target);
    Var l_final = tape.cross_entropy(fw.s_final, target);
    return tape.add(l_init, l_final);
}

template <typename T>
void Network<T>::sgd_update(Tape<T>& tape, T lr) {
    if (lifted_.size() != params_.size()) throw std::logic_error("sgd_update before forward");
    for (size_t i = 0; i < params_.size(); ++i) {
        const Tensor<T>& g = tape.grad(lifted_[i]);
        if (g.numel() == 0) continue;  // parameter not reached by the loss
        kernels::sgd_step(params_[i], g, lr);
    }
}

namespace {

void append_u32le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

uint32_t read_u32le(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) | (static_cast<uint32_t>(p[2]) << 16) |
           (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace

template <typename T>
void save_checkpoint(const Network<T>& net, const std::string& path) {
    json manifest = json::array();
    int64_t offset = 0;
    for (size_t i = 0; i < net.param_count(); ++i) {
        const auto& p = net.param(i);
        manifest.push_back({{"name", net.param_name(i)}, {"shape", p.shape}, {"offset", offset}});
        offset += p.numel() * 4;
    }
    json header{{"format", "mpseg-ckpt-v1"},
                {"config", json::parse(net.config().to_json())},
                {"manifest", manifest},
                {"payload_bytes", offset}};

    std::string payload;
    payload.reserve(static_cast<size_t>(offset));
    for (size_t i = 0; i < net.param_count(); ++i)
        for (T v : net.param(i).data) {
            const float f = static_cast<float>(v);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            append_u32le(payload, bits);
        }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out << header.dump() << "\n" << payload;
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

NetworkConfig checkpoint_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    std::getline(in, line);
    return NetworkConfig::from_json(json::parse(line).at("config").dump());
}

template <typename T>
Network<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint truncated: " + path);
    json header = json::parse(line);
    if (header.at("format").get<std::string>() != "mpseg-ckpt-v1")
        throw std::runtime_error("unknown checkpoint format in " + path);

    Network<T> net(config_from_json_obj(header.at("config")), 0);
    const int64_t payload_bytes = header.at("payload_bytes").get<int64_t>();
    std::string payload(static_cast<size_t>(payload_bytes), '\0');
    in.read(payload.data(), payload_bytes);
    if (in.gcount() != payload_bytes) throw std::runtime_error("checkpoint payload truncated: " + path);

    const json& manifest = header.at("manifest");
    if (manifest.size() != net.param_count())
        throw std::runtime_error("checkpoint manifest has " + std::to_string(manifest.size()) + " entries, network has " +
                                 std::to_string(net.param_count()));
    for (size_t i = 0; i < net.param_count(); ++i) {
        const json& e = manifest[i];
        if (e.at("name").get<std::string>() != net.param_name(i))
            throw std::runtime_error("checkpoint parameter " + std::to_string(i) + " is '" +
                                     e.at("name").get<std::string>() + "', expected '" + net.param_name(i) + "'");
        Tensor<T>& p = net.param(i);
        if (e.at("shape").get<std::vector<int64_t>>() != p.shape)
            throw std::runtime_error("checkpoint shape mismatch for " + net.param_name(i));
        const int64_t off = e.at("offset").get<int64_t>();
        if (off < 0 || off + p.numel() * 4 > payload_bytes)
            throw std::runtime_error("checkpoint offset out of range for " + net.param_name(i));
        const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data()) + off;
        for (int64_t j = 0; j < p.numel(); ++j) {
            const uint32_t bits = read_u32le(bytes + j * 4);
            float f;
            std::memcpy(&f, &bits, 4);
            p.data[static_cast<size_t>(j)] = static_cast<T>(f);
        }
    }
    return net;
}

template class Network<float>;
template class Network<double>;
template void save_checkpoint<float>(const Network<float>&, const std::string&);
template void save_checkpoint<double>(const Network<double>&, const std::string&);
template Network<float> load_checkpoint<float>(const std::string&);
template Network<double> load_checkpoint<double>(const std::string&);

}  // namespace mpseg
