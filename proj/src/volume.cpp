#include "mpseg/volume.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace mpseg {

using nlohmann::json;

namespace {

void write_header(const std::string& path, const char* dtype, const std::array<int64_t, 3>& shape,
                  const std::array<double, 3>& spacing) {
    json j{{"dtype", dtype}, {"shape", shape}, {"spacing", spacing}};
    std::ofstream out(path + ".json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write volume header: " + path + ".json");
    out << j.dump() << "\n";
}

json read_header(const std::string& path, const char* want_dtype, std::array<int64_t, 3>& shape,
                 std::array<double, 3>& spacing) {
    std::ifstream in(path + ".json", std::ios::binary);
    if (!in) throw std::runtime_error("cannot read volume header: " + path + ".json");
    json j = json::parse(in);
    const std::string dtype = j.at("dtype").get<std::string>();
    if (dtype != want_dtype)
        throw std::runtime_error("volume " + path + " has dtype " + dtype + ", expected " + want_dtype);
    auto s = j.at("shape").get<std::vector<int64_t>>();
    auto sp = j.at("spacing").get<std::vector<double>>();
    if (s.size() != 3 || sp.size() != 3) throw std::runtime_error("volume header malformed: " + path);
    shape = {s[0], s[1], s[2]};
    spacing = {sp[0], sp[1], sp[2]};
    return j;
}

std::string read_payload(const std::string& path, size_t want_bytes) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read volume payload: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() != want_bytes)
        throw std::runtime_error("volume " + path + " payload is " + std::to_string(bytes.size()) +
                                 " bytes, header implies " + std::to_string(want_bytes));
    return bytes;
}

}  // namespace

void write_volume(const ImageVolume& v, const std::string& path) {
    write_header(path, "f32le", v.shape, v.spacing);
    std::string payload(v.data.size() * 4, '\0');
    for (size_t i = 0; i < v.data.size(); ++i) {
        uint32_t bits;
        std::memcpy(&bits, &v.data[i], 4);
        payload[4 * i] = static_cast<char>(bits & 0xff);
        payload[4 * i + 1] = static_cast<char>((bits >> 8) & 0xff);
        payload[4 * i + 2] = static_cast<char>((bits >> 16) & 0xff);
        payload[4 * i + 3] = static_cast<char>((bits >> 24) & 0xff);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write volume payload: " + path);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

void write_volume(const MaskVolume& v, const std::string& path) {
    for (uint8_t b : v.data)
        if (b > 1) throw std::invalid_argument("mask volume contains value " + std::to_string(int(b)) + ", not in {0,1}");
    write_header(path, "u8", v.shape, v.spacing);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write volume payload: " + path);
    out.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size()));
}

ImageVolume read_image_volume(const std::string& path) {
    ImageVolume v;
    read_header(path, "f32le", v.shape, v.spacing);
    const size_t n = static_cast<size_t>(v.shape[0] * v.shape[1] * v.shape[2]);
    const std::string bytes = read_payload(path, n * 4);
    v.data.resize(n);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (size_t i = 0; i < n; ++i) {
        const uint32_t bits = static_cast<uint32_t>(p[4 * i]) | (static_cast<uint32_t>(p[4 * i + 1]) << 8) |
                              (static_cast<uint32_t>(p[4 * i + 2]) << 16) |
                              (static_cast<uint32_t>(p[4 * i + 3]) << 24);
        std::memcpy(&v.data[i], &bits, 4);
    }
    return v;
}

MaskVolume read_mask_volume(const std::string& path) {
    MaskVolume v;
    read_header(path, "u8", v.shape, v.spacing);
    const size_t n = static_cast<size_t>(v.shape[0] * v.shape[1] * v.shape[2]);
    const std::string bytes = read_payload(path, n);
    v.data.assign(reinterpret_cast<const uint8_t*>(bytes.data()), reinterpret_cast<const uint8_t*>(bytes.data()) + n);
    for (uint8_t b : v.data)
        if (b > 1) throw std::runtime_error("mask volume " + path + " contains values outside {0,1}");
    return v;
}

}  // namespace mpseg
