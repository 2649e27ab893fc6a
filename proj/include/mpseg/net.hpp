#pragma once

#include <array>
#include <string>
#include <vector>

#include "mpseg/sam.hpp"
#include "mpseg/tape.hpp"
#include "mpseg/urim.hpp"

namespace mpseg {

enum class FusionMode { Sp, MpAdd, Sam };

std::string fusion_mode_name(FusionMode m);
FusionMode fusion_mode_from_name(const std::string& name);

/// Two-stream encoder/decoder configuration. Five stages; stage 1 keeps the
/// input resolution and stages 2-5 halve it, so inputs must be divisible
/// by 16.
struct NetworkConfig {
    std::vector<int64_t> widths{8, 16, 32, 64, 128};
    int64_t groups = 4;  // grouped-conv cardinality in the residual blocks
    FusionMode fusion = FusionMode::Sam;
    bool urim = true;
    int64_t decision_width = 16;  // D
    int64_t in_channels = 3;      // adjacent slices per phase

    void validate() const;
    std::string to_json() const;
    static NetworkConfig from_json(const std::string& text);
};

template <typename T>
class Network {
public:
    Network(NetworkConfig cfg, uint64_t seed);

    const NetworkConfig& config() const { return cfg_; }

    size_t param_count() const { return params_.size(); }
    const std::string& param_name(size_t i) const { return names_[i]; }
    const Tensor<T>& param(size_t i) const { return params_[i]; }
    Tensor<T>& param(size_t i) { return params_[i]; }

    struct Forward {
        Var s_init, s_final;
        std::array<Var, 4> aggregated;
        Var decision_features;
        std::vector<Tensor<T>> confidence_trace;
    };

    /// Registers every parameter as a tape leaf. Must precede the *_forward
    /// calls on the same tape.
    void lift(Tape<T>& tape, bool needs_grad);

    /// Uses caller-provided leaf vars (one per parameter, in manifest order)
    /// instead of lifting; gradients then land on the caller's vars.
    void set_lifted(const std::vector<Var>& vars);

    /// Runs both streams (PV only in sp mode) and returns the four
    /// aggregated maps of stages 2-5.
    std::array<Var, 4> encoder_forward(Tape<T>& tape, Var pv_in, Var art_in);

    /// Upsamples and fuses the aggregated maps; returns (s_init, decision
    /// features) at the given output resolution.
    std::pair<Var, Var> decoder_forward(Tape<T>& tape, const std::array<Var, 4>& aggregated, int64_t out_h,
                                        int64_t out_w);

    /// lift + encoder + decoder + optional URIM head.
    Forward forward(Tape<T>& tape, const Tensor<T>& pv, const Tensor<T>& art, bool needs_grad);

    /// Same pipeline over the current lifted vars (lift or set_lifted first).
    Forward forward_lifted(Tape<T>& tape, const Tensor<T>& pv, const Tensor<T>& art);

    /// cross_entropy(s_init, target) + cross_entropy(s_final, target).
    Var total_loss(Tape<T>& tape, const Forward& fw, const Tensor<uint8_t>& target);

    /// SGD step from the gradients of the last lifted pass.
    void sgd_update(Tape<T>& tape, T lr);

private:
    struct ConvRef {
        int w = -1, b = -1;
    };
    struct BlockRef {
        ConvRef conv1, conv2, proj;
        bool has_proj = false;
        int64_t groups = 1;
        int64_t stride = 1;
    };
    struct SamRef {
        ConvRef c3, c5, c7, fuse;
        int64_t channels = 0;
    };

    int add_param(const std::string& name, Tensor<T> t);
    ConvRef add_conv(const std::string& name, int64_t cout, int64_t cin, int64_t k, int64_t groups, Rng& rng);
    BlockRef add_block(const std::string& name, int64_t cin, int64_t cout, int64_t stride, int64_t groups, Rng& rng);

    Var conv(Tape<T>& tape, Var x, const ConvRef& c, Conv2dSpec spec);
    Var block_forward(Tape<T>& tape, Var x, const BlockRef& blk);
    SamVars sam_vars(const SamRef& s) const;
    UrimVars urim_vars() const;

    NetworkConfig cfg_;
    std::vector<std::string> names_;
    std::vector<Tensor<T>> params_;
    std::vector<Var> lifted_;

    std::array<BlockRef, 5> pv_stages_;
    std::array<BlockRef, 5> art_stages_;
    std::array<SamRef, 4> sams_;
    ConvRef dec1_, dec2_, head_;
    struct UrimRef {
        std::array<ConvRef, 4> lc;
        ConvRef fuse;
    } urim_;
    bool has_art_ = false;
    bool has_sam_ = false;
};

/// Checkpoint file: one line of compact JSON (config + parameter manifest
/// with byte offsets) followed by the raw little-endian float32 payload in
/// manifest order.
template <typename T>
void save_checkpoint(const Network<T>& net, const std::string& path);

template <typename T>
Network<T> load_checkpoint(const std::string& path);

/// Reads only the config header of a checkpoint.
NetworkConfig checkpoint_config(const std::string& path);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace mpseg
