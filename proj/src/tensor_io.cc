#include "sparseattn/tensor_io.h"

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <vector>

#include "sparseattn/errors.h"

namespace sparseattn {
namespace {

constexpr std::array<char, 4> kMagic = {'S', 'P', 'T', '2'};

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b;
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}

std::uint64_t get_le(std::istream& in, int bytes) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), bytes);
  if (!in) throw IoError("SPT2: truncated stream");
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_double(const std::string& cell) {
  double v = 0.0;
  std::size_t pos = 0;
  try {
    v = std::stod(cell, &pos);
  } catch (const std::exception&) {
    throw IoError("CSV: not a number: '" + cell + "'");
  }
  while (pos < cell.size() && (cell[pos] == ' ' || cell[pos] == '\r')) ++pos;
  if (pos != cell.size()) throw IoError("CSV: trailing characters in '" + cell + "'");
  return v;
}

}  // namespace

std::string format_double(double x) {
  std::array<char, 64> buf;
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  if (ec != std::errc()) throw IoError("format_double: conversion failed");
  return std::string(buf.data(), end);
}

void write_spt2(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.dims()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double x : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(x));
  if (!out) throw IoError("SPT2: write failed");
}

Tensor read_spt2(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || magic != kMagic) throw IoError("SPT2: bad magic");
  const auto rank = static_cast<std::uint32_t>(get_le(in, 4));
  if (rank == 0 || rank > 8) throw IoError("SPT2: unsupported rank " + std::to_string(rank));
  std::vector<std::size_t> dims(rank);
  std::size_t count = 1;
  for (auto& d : dims) {
    d = static_cast<std::size_t>(get_le(in, 4));
    if (d == 0) throw IoError("SPT2: zero extent");
    count *= d;
  }
  std::vector<double> data(count);
  for (auto& x : data) x = std::bit_cast<double>(get_le(in, 8));
  return Tensor(std::move(dims), std::move(data));
}

void save_spt2(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_spt2(out, t);
}

Tensor load_spt2(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    return read_spt2(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_csv(std::ostream& out, const Tensor& t) {
  require_matrix(t, "write_csv");
  for (std::size_t c = 0; c < t.cols(); ++c) out << (c ? ",c" : "c") << c;
  out << '\n';
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) {
      if (c) out << ',';
      out << format_double(t(r, c));
    }
    out << '\n';
  }
  if (!out) throw IoError("CSV: write failed");
}

Tensor read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("CSV: missing header");
  const std::size_t cols = split_commas(line).size();
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto cells = split_commas(line);
    if (cells.size() != cols) {
      throw IoError("CSV: row " + std::to_string(rows.size() + 1) + " has " +
                    std::to_string(cells.size()) + " cells, header has " + std::to_string(cols));
    }
    std::vector<double> row;
    row.reserve(cols);
    for (const auto& c : cells) row.push_back(parse_double(c));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("CSV: no data rows");
  return Tensor::from_rows(rows);
}

void save_csv(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_csv(out, t);
}

Tensor load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    return read_csv(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Tensor load_tensor(const std::filesystem::path& path) {
  if (path.extension() == ".csv") return load_csv(path);
  return load_spt2(path);
}

}  // namespace sparseattn
