#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rvit/tensor.hpp"

namespace rvit {

// "MTEN1" binary tensor format: magic bytes `MTEN1`, u8 rank, u32
// little-endian dims, f32 little-endian payload.
void write_mten(std::ostream& os, const Tensor& t);
Tensor read_mten(std::istream& is, const std::string& what = "tensor");

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Named-tensor archive: magic `MARC1`, u8 version, u32 little-endian JSON
// header length, JSON header (metadata + ordered tensor names), then one
// MTEN1 blob per listed tensor. Used for checkpoints.
struct Archive {
  std::string meta_json = "{}";
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  void put(const std::string& name, Tensor t);
  int64_t total_params() const;
};

void save_archive(const std::string& path, const Archive& a);
Archive load_archive(const std::string& path);

}  // namespace rvit
