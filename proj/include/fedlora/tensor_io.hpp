#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fedlora/common.hpp"
#include "fedlora/tensor.hpp"

// Flat binary tensor blob: rank as u64 LE, each dimension as u64 LE, then the
// row-major values as f64 LE. This is the wire format for every tensor that
// crosses a file or upload boundary.

namespace fedlora::ad {

inline std::size_t tensor_blob_size(const Shape& shape) {
    return 8 * (1 + shape.size()) + 8 * shape_numel(shape);
}

inline void append_tensor_blob(std::vector<std::uint8_t>& out, const Tensor& t) {
    append_u64le(out, t.rank());
    for (std::size_t i = 0; i < t.rank(); ++i) append_u64le(out, t.dim(i));
    for (double v : t.data()) append_f64le(out, v);
}

inline std::vector<std::uint8_t> tensor_blob(const Tensor& t) {
    std::vector<std::uint8_t> out;
    out.reserve(tensor_blob_size(t.shape()));
    append_tensor_blob(out, t);
    return out;
}

// Reads one blob starting at `offset`, advancing it past the record.
inline Tensor read_tensor_blob(const std::vector<std::uint8_t>& bytes, std::size_t& offset) {
    if (offset + 8 > bytes.size()) throw ContractError("tensor blob: truncated header");
    const std::uint64_t rank = read_u64le(&bytes[offset]);
    offset += 8;
    if (rank > 8) throw ContractError("tensor blob: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (std::uint64_t i = 0; i < rank; ++i) {
        if (offset + 8 > bytes.size()) throw ContractError("tensor blob: truncated dims");
        shape[i] = static_cast<std::size_t>(read_u64le(&bytes[offset]));
        offset += 8;
    }
    const std::size_t n = shape_numel(shape);
    if (offset + 8 * n > bytes.size()) throw ContractError("tensor blob: truncated payload");
    std::vector<double> value(n);
    for (std::size_t i = 0; i < n; ++i) {
        value[i] = read_f64le(&bytes[offset]);
        offset += 8;
    }
    return Tensor::constant(std::move(shape), std::move(value));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    auto bytes = tensor_blob(t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ContractError("save_tensor: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContractError("load_tensor: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t offset = 0;
    Tensor t = read_tensor_blob(bytes, offset);
    if (offset != bytes.size()) throw ContractError("load_tensor: trailing bytes in " + path);
    return t;
}

}  // namespace fedlora::ad
