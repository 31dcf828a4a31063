#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "sparseattn/tensor.h"

namespace sparseattn {

// SPT2 layout: magic "SPT2" (53 50 54 32), u32 LE rank, rank x u32 LE
// extents, then the row-major payload as f64 LE.
void write_spt2(std::ostream& out, const Tensor& t);
Tensor read_spt2(std::istream& in);
void save_spt2(const std::filesystem::path& path, const Tensor& t);
Tensor load_spt2(const std::filesystem::path& path);

// Rank-2 CSV with a `c0,c1,...` header row. Values use 17 significant digits
// so a write/read cycle is lossless.
void write_csv(std::ostream& out, const Tensor& t);
Tensor read_csv(std::istream& in);
void save_csv(const std::filesystem::path& path, const Tensor& t);
Tensor load_csv(const std::filesystem::path& path);

// Picks the format from the extension: ".csv" is CSV, everything else SPT2.
Tensor load_tensor(const std::filesystem::path& path);

// Shortest round-trippable decimal form used by every CSV writer here.
std::string format_double(double x);

}  // namespace sparseattn
