#include "sparseattn/numerics.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "sparseattn/errors.h"

namespace sparseattn {
namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

std::string dims_str(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + dims_str(a) + " * " + dims_str(b) + ")");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros(m, n);
  // i-p-j order keeps per-entry accumulation in ascending p.
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.row(i).data();
    const double* arow = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ (" + dims_str(a) + " * " + dims_str(b) + "^T)");
  }
  const std::size_t m = a.rows(), n = b.rows();
  Tensor out = Tensor::zeros(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) = dot(a.row(i), b.row(j));
  }
  require_finite(out, "matmul_nt");
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dimensions differ (" + dims_str(a) + "^T * " + dims_str(b) + ")");
  }
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros(m, n);
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.row(p).data();
    const double* brow = b.row(p).data();
    for (std::size_t i = 0; i < m; ++i) {
      const double api = arow[i];
      double* orow = out.row(i).data();
      for (std::size_t j = 0; j < n; ++j) orow[j] += api * brow[j];
    }
  }
  require_finite(out, "matmul_tn");
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out = Tensor::zeros(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  require_finite(x, "softmax_rows");
  Tensor out = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (double& v : o) v /= total;
  }
  return out;
}

Tensor block_mean_pool(const Tensor& x, std::size_t block) {
  require_matrix(x, "block_mean_pool");
  if (block < 1) throw ParameterError("block_mean_pool: block must be >= 1");
  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t blocks = ceil_div(n, block);
  Tensor out = Tensor::zeros(blocks, d);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t begin = b * block;
    const std::size_t end = std::min(begin + block, n);
    auto o = out.row(b);
    for (std::size_t r = begin; r < end; ++r) {
      auto in = x.row(r);
      for (std::size_t c = 0; c < d; ++c) o[c] += in[c];
    }
    const double count = static_cast<double>(end - begin);
    for (double& v : o) v /= count;
  }
  require_finite(out, "block_mean_pool");
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double sum(std::span<const double> a) {
  double acc = 0.0;
  for (double x : a) acc += x;
  return acc;
}

double l1_norm(std::span<const double> a) {
  double acc = 0.0;
  for (double x : a) acc += std::abs(x);
  return acc;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  }
  return worst;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  add_inplace(out, b);
  return out;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (double& x : out.data()) x *= s;
  return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

}  // namespace sparseattn
