#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace mpseg {

/// 3-d scan volume: shape [D,H,W], spacing [sz,sy,sx] in mm, row-major in
/// C order (W fastest). Image volumes are float32, masks are uint8 in {0,1}.
template <typename V>
struct Volume {
    std::array<int64_t, 3> shape{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<V> data;

    Volume() = default;
    Volume(std::array<int64_t, 3> s, std::array<double, 3> sp, V fill = V{})
        : shape(s), spacing(sp), data(static_cast<size_t>(s[0] * s[1] * s[2]), fill) {}

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    V& at(int64_t d, int64_t h, int64_t w) { return data[static_cast<size_t>((d * shape[1] + h) * shape[2] + w)]; }
    V at(int64_t d, int64_t h, int64_t w) const {
        return data[static_cast<size_t>((d * shape[1] + h) * shape[2] + w)];
    }
};

using ImageVolume = Volume<float>;
using MaskVolume = Volume<uint8_t>;

/// Raw little-endian payload at `path` plus a sidecar JSON header at
/// `path + ".json"` holding {"dtype","shape","spacing"}. Round-trips are
/// byte-exact. Mask volumes are validated to contain only {0,1}.
void write_volume(const ImageVolume& v, const std::string& path);
void write_volume(const MaskVolume& v, const std::string& path);
ImageVolume read_image_volume(const std::string& path);
MaskVolume read_mask_volume(const std::string& path);

}  // namespace mpseg
