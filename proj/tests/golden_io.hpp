#pragma once

// Raw little-endian float64 regression files under tests/golden/. A missing
// file is written from the current run when MPSEG_WRITE_GOLDEN=1 is set;
// otherwise the test fails loudly so stale checkouts are obvious.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mpseg/tensor.hpp"

inline std::string golden_path(const std::string& name) {
    return std::string(MPSEG_TEST_DIR) + "/golden/" + name;
}

inline bool golden_exists(const std::string& name) {
    std::ifstream in(golden_path(name), std::ios::binary);
    return in.good();
}

inline void write_golden(const std::string& name, const mpseg::Tensor<double>& t) {
    std::ofstream out(golden_path(name), std::ios::binary);
    REQUIRE(out.good());
    for (double v : t.data) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        out.write(buf, 8);
    }
}

inline mpseg::Tensor<double> read_golden(const std::string& name, std::vector<int64_t> shape) {
    mpseg::Tensor<double> t(std::move(shape));
    std::ifstream in(golden_path(name), std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "missing golden file ", name, " (set MPSEG_WRITE_GOLDEN=1 to record)");
    std::vector<char> bytes(static_cast<size_t>(t.numel()) * 8);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE(in.gcount() == static_cast<std::streamsize>(bytes.size()));
    for (int64_t i = 0; i < t.numel(); ++i) {
        uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[static_cast<size_t>(i * 8 + b)])) << (8 * b);
        std::memcpy(&t.data[static_cast<size_t>(i)], &bits, 8);
    }
    return t;
}

/// Compares against the stored golden values at tight relative tolerance,
/// recording the file first if requested via MPSEG_WRITE_GOLDEN=1.
inline void check_golden(const std::string& name, const mpseg::Tensor<double>& t) {
    if (!golden_exists(name) && std::getenv("MPSEG_WRITE_GOLDEN")) {
        write_golden(name, t);
        MESSAGE("recorded golden file ", name);
        return;
    }
    auto want = read_golden(name, t.shape);
    for (int64_t i = 0; i < t.numel(); ++i)
        CHECK(t.data[static_cast<size_t>(i)] ==
              doctest::Approx(want.data[static_cast<size_t>(i)]).epsilon(1e-12));
}
