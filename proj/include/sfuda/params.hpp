#ifndef SFUDA_PARAMS_HPP
#define SFUDA_PARAMS_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#include "sfuda/types.hpp"

namespace sfuda {

/// Non-owning view of one named model tensor (flattened). Scalar may be
/// const-qualified for read-only views.
template <typename Scalar>
struct ParamRef {
    using Plain = std::remove_const_t<Scalar>;
    using MapType = Eigen::Map<
        std::conditional_t<std::is_const_v<Scalar>, const VecX<Plain>, VecX<Plain>>>;

    std::string name;
    std::vector<int> shape;
    Scalar* data = nullptr;
    Eigen::Index size = 0;
    bool trainable = true;

    MapType vec() const { return MapType{data, size}; }
};

template <typename Scalar>
using ParamList = std::vector<ParamRef<Scalar>>;

/// Deep copy of a model's named state (trainable parameters plus BN running
/// statistics). Entries whose name contains "running_" are the non-trainable
/// statistics; everything else is a trainable parameter.
template <typename Scalar>
struct ParameterSnapshot {
    struct Entry {
        std::string name;
        std::vector<int> shape;
        VecX<Scalar> values;
        bool trainable = true;
    };
    std::vector<Entry> entries;

    /// Parameter-list view into the snapshot's own storage.
    ParamList<Scalar> view() {
        ParamList<Scalar> out;
        out.reserve(entries.size());
        for (auto& e : entries)
            out.push_back({e.name, e.shape, e.values.data(), e.values.size(), e.trainable});
        return out;
    }
    ParamList<const Scalar> view() const {
        ParamList<const Scalar> out;
        out.reserve(entries.size());
        for (const auto& e : entries)
            out.push_back({e.name, e.shape, e.values.data(), e.values.size(), e.trainable});
        return out;
    }
};

inline bool param_name_trainable(const std::string& name) {
    return name.find("running_") == std::string::npos;
}

namespace detail {

inline std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n, std::uint32_t crc = 0) {
    crc = ~crc;
    for (std::size_t i = 0; i < n; ++i) {
        crc ^= data[i];
        for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (~(crc & 1u) + 1u));
    }
    return ~crc;
}

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T>);
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline constexpr const char* kSnapshotMagic = "SFUDA-SNAP v1";

/// Snapshot file: magic line, entry count, then per-entry records
/// (name, shape, little-endian float32 payload), then a CRC32 of all
/// payload bytes.
template <typename Scalar>
void save_snapshot(const ParameterSnapshot<Scalar>& snap, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("save_snapshot: cannot open " + path);
    os << kSnapshotMagic << '\n';
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(snap.entries.size()));
    std::uint32_t crc = 0;
    for (const auto& e : snap.entries) {
        detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(e.shape.size()));
        for (int d : e.shape) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        std::vector<float> payload(e.values.size());
        for (Eigen::Index i = 0; i < e.values.size(); ++i) payload[i] = static_cast<float>(e.values[i]);
        static_assert(sizeof(float) == 4);
        const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
        const std::size_t nbytes = payload.size() * 4;
        // x86 stores float32 little-endian already; assert rather than swap.
        static_assert(std::endian::native == std::endian::little, "little-endian host required");
        os.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(nbytes));
        crc = detail::crc32_bytes(bytes, nbytes, crc);
    }
    detail::write_le<std::uint32_t>(os, crc);
    if (!os) throw io_error("save_snapshot: write failed for " + path);
}

template <typename Scalar>
ParameterSnapshot<Scalar> load_snapshot(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("load_snapshot: cannot open " + path);
    std::string magic;
    std::getline(is, magic);
    if (magic != kSnapshotMagic) throw io_error("load_snapshot: bad magic in " + path);
    const auto count = detail::read_le<std::uint32_t>(is);
    ParameterSnapshot<Scalar> snap;
    snap.entries.resize(count);
    std::uint32_t crc = 0;
    for (auto& e : snap.entries) {
        const auto name_len = detail::read_le<std::uint16_t>(is);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        const auto ndim = detail::read_le<std::uint8_t>(is);
        e.shape.resize(ndim);
        std::size_t total = 1;
        for (auto& d : e.shape) {
            d = static_cast<int>(detail::read_le<std::uint32_t>(is));
            total *= static_cast<std::size_t>(d);
        }
        std::vector<float> payload(total);
        is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total * 4));
        if (!is) throw io_error("load_snapshot: truncated file " + path);
        crc = detail::crc32_bytes(reinterpret_cast<const unsigned char*>(payload.data()), total * 4, crc);
        e.values.resize(static_cast<Eigen::Index>(total));
        for (std::size_t i = 0; i < total; ++i) e.values[static_cast<Eigen::Index>(i)] = static_cast<Scalar>(payload[i]);
        e.trainable = param_name_trainable(e.name);
    }
    const auto stored = detail::read_le<std::uint32_t>(is);
    if (!is || stored != crc) throw io_error("load_snapshot: checksum mismatch in " + path);
    return snap;
}

}  // namespace sfuda

#endif
