#pragma once

// Binary tensor container shared by every persisted artifact.
//
//   "AGNO" | u32 version | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u64 dims[rank]
//   payloads, in manifest order: row-major f64 values
//
// All integers and floats are little-endian.

#include <agnocomm/common.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace agnocomm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;  // row-major

  std::uint64_t element_count() const;
};

std::vector<unsigned char> encode_checkpoint(std::span<const Tensor> tensors);
std::vector<Tensor> decode_checkpoint(std::span<const unsigned char> bytes);

void write_checkpoint(const std::filesystem::path& path, std::span<const Tensor> tensors);
std::vector<Tensor> read_checkpoint(const std::filesystem::path& path);

// Matrix -> dims {rows, cols}; Vector -> dims {n}.
Tensor to_tensor(const std::string& name, const Matrix& m);
Tensor to_tensor(const std::string& name, const Vector& v);
void assign_from(const Tensor& t, Matrix& m);
void assign_from(const Tensor& t, Vector& v);

const Tensor& find_tensor(std::span<const Tensor> tensors, const std::string& name);

template <class P>
std::vector<Tensor> to_tensors(const P& params) {
  std::vector<Tensor> out;
  visit_tensors(params, [&](const std::string& name, const auto& t) { out.push_back(to_tensor(name, t)); });
  return out;
}

// Fills an already-shaped container; every tensor must be present with the
// exact shape.
template <class P>
void from_tensors(P& params, std::span<const Tensor> tensors) {
  visit_tensors(params, [&](const std::string& name, auto& t) { assign_from(find_tensor(tensors, name), t); });
}

}  // namespace agnocomm
