#pragma once

#include <iosfwd>
#include <string>

#include "dlct/tensor.hpp"

namespace dlct {

// DLT1 container: magic "DLT1", u32 rank, u32 extents, float32 payload,
// row-major, little-endian. Values are truncated to float32 on write and
// widened back to float64 on read.
void write_dlt1(std::ostream& os, const Tensor& t);
Tensor read_dlt1(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Rounds a tensor through the float32 payload in memory, so its values are
// exactly what a save/load cycle would produce.
void quantize_f32_inplace(Tensor& t);

}  // namespace dlct
