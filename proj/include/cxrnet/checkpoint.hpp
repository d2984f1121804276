#pragma once

// Binary checkpoint layout (all integers and reals little-endian):
//
//   "CNXC1"                       5-byte magic
//   u32 n, n bytes                resolved run config (key=value text)
//   u32 count                     number of tensors
//   count x { u32 rank, rank x u32 extent, prod(extent) x f32 }
//   u64 guard                     byte length of everything before the guard
//
// Tensors appear in the model's declaration order (Model::state_tensors).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "cxrnet/config.hpp"
#include "cxrnet/error.hpp"
#include "cxrnet/imaging.hpp"
#include "cxrnet/model.hpp"

namespace cxr {

inline constexpr char kCheckpointMagic[] = "CNXC1";

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    std::vector<std::uint8_t> bytes;
};

class ByteReader {
public:
    ByteReader(const std::vector<std::uint8_t>& b, std::size_t end) : bytes_(b), end_(end) {}

    void need(std::size_t n, const char* what) {
        require(pos_ + n <= end_, ErrorKind::corruption,
                std::string("checkpoint truncated reading ") + what + " at byte " + std::to_string(pos_));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

}  // namespace detail

template <typename Real>
struct LoadedCheckpoint {
    Model<Real> model;
    RunConfig run;  // run.model == model.config()
};

// `run` supplies the non-architecture settings (preprocessing, split seed);
// its model section is replaced by the model's own config.
template <typename Real>
std::vector<std::uint8_t> checkpoint_bytes(Model<Real>& model, RunConfig run = {}) {
    run.model = model.config();
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, 5);
    const std::string cfg = to_text(run);
    w.u32(static_cast<std::uint32_t>(cfg.size()));
    w.raw(cfg.data(), cfg.size());
    const auto tensors = model.state_tensors();
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.u32(static_cast<std::uint32_t>(t->rank()));
        for (Extent e : t->shape()) w.u32(static_cast<std::uint32_t>(e));
        for (Real v : t->span()) w.f32(static_cast<float>(v));
    }
    const std::uint64_t guard = w.bytes.size();
    w.u64(guard);
    return std::move(w.bytes);
}

// Parses a full checkpoint; throws a corruption error (and returns nothing)
// on any inconsistency.
template <typename Real = real_t>
LoadedCheckpoint<Real> parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
    require(bytes.size() >= 5 + 8 && std::memcmp(bytes.data(), kCheckpointMagic, 5) == 0,
            ErrorKind::corruption, "bad checkpoint magic (expected CNXC1)");
    std::uint64_t guard = 0;
    for (int i = 0; i < 8; ++i) guard |= std::uint64_t(bytes[bytes.size() - 8 + i]) << (8 * i);
    require(guard == bytes.size() - 8, ErrorKind::corruption,
            "checkpoint length guard mismatch: guard " + std::to_string(guard) + ", payload " +
                std::to_string(bytes.size() - 8));

    detail::ByteReader r(bytes, bytes.size() - 8);
    r.str(5, "magic");
    const std::uint32_t cfg_len = r.u32("config length");
    RunConfig run;
    try {
        apply_text(run, r.str(cfg_len, "config"));
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::corruption) throw;
        fail(ErrorKind::corruption, std::string("checkpoint config unreadable: ") + e.what());
    }
    Rng init(0);
    Model<Real> model = [&] {
        try {
            return Model<Real>(run.model, init);
        } catch (const Error& e) {
            fail(ErrorKind::corruption, std::string("checkpoint config invalid: ") + e.what());
        }
    }();
    auto tensors = model.state_tensors();
    const std::uint32_t count = r.u32("tensor count");
    require(count == tensors.size(), ErrorKind::corruption,
            "checkpoint holds " + std::to_string(count) + " tensors, model declares " +
                std::to_string(tensors.size()));
    for (auto& [name, t] : tensors) {
        const std::uint32_t rank = r.u32("rank");
        require(rank == t->rank(), ErrorKind::corruption, "rank disagreement for " + name);
        for (std::size_t a = 0; a < rank; ++a)
            require(r.u32("extent") == static_cast<std::uint32_t>(t->dim(a)), ErrorKind::corruption,
                    "shape disagreement for " + name);
        r.need(t->size() * 4, name.c_str());
        for (auto& v : t->span()) v = static_cast<Real>(r.f32("tensor data"));
    }
    require(r.pos() == bytes.size() - 8, ErrorKind::corruption, "trailing bytes before length guard");
    return {std::move(model), std::move(run)};
}

template <typename Real>
void save_checkpoint(Model<Real>& model, const std::string& path, const RunConfig& run = {}) {
    write_file_bytes(path, checkpoint_bytes(model, run));
}

template <typename Real = real_t>
LoadedCheckpoint<Real> load_checkpoint_full(const std::string& path) {
    return parse_checkpoint<Real>(read_file_bytes(path));
}

template <typename Real = real_t>
Model<Real> load_checkpoint(const std::string& path) {
    return std::move(load_checkpoint_full<Real>(path).model);
}

}  // namespace cxr
