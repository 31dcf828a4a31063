#include "oracles/oracles.h"

#include <cmath>
#include <stdexcept>

namespace oracles {

Deviation deviation(const Tensor& value, const Tensor& reference) {
  if (value.size() != reference.size()) throw std::invalid_argument("deviation: size mismatch");
  Deviation d;
  double ref_max = 0.0;
  for (std::size_t i = 0; i < value.size(); ++i) {
    d.max_abs = std::max(d.max_abs, std::abs(value.data()[i] - reference.data()[i]));
    ref_max = std::max(ref_max, std::abs(reference.data()[i]));
  }
  d.relative = ref_max > 0.0 ? d.max_abs / ref_max : d.max_abs;
  return d;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::zeros(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  }
  return c;
}

Tensor naive_softmax_rows(const Tensor& x) {
  Tensor y = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += std::exp(x(i, j) - mx);
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = std::exp(x(i, j) - mx) / s;
  }
  return y;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& token_mask) {
  const std::size_t n = q.rows(), d = q.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor s = Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q(i, c) * k(j, c);
      const bool keep = token_mask(i, j) != 0.0;
      any = any || keep;
      s(i, j) = keep ? dot * scale : kNegInf;
    }
    if (!any) throw std::invalid_argument("masked_attention: empty mask row");
  }
  const Tensor p = naive_softmax_rows(s);
  Tensor o = Tensor::zeros(n, v.cols());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < v.cols(); ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += p(i, j) * v(j, c);
      o(i, c) = acc;
    }
  }
  return o;
}

Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  return masked_attention(q, k, v, Tensor::filled(q.rows(), k.rows(), 1.0));
}

Tensor mean_pool(const Tensor& x, std::size_t block) {
  const std::size_t n = x.rows();
  const std::size_t out_rows = (n + block - 1) / block;
  Tensor y = Tensor::zeros(out_rows, x.cols());
  for (std::size_t b = 0; b < out_rows; ++b) {
    const std::size_t lo = b * block, hi = std::min(n, lo + block);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double s = 0.0;
      for (std::size_t r = lo; r < hi; ++r) s += x(r, c);
      y(b, c) = s / static_cast<double>(hi - lo);
    }
  }
  return y;
}

Tensor pooled_probs(const Tensor& q, const Tensor& k, std::size_t b_q, std::size_t b_kv) {
  const Tensor pq = mean_pool(q, b_q);
  const Tensor pk = mean_pool(k, b_kv);
  Tensor s = Tensor::zeros(pq.rows(), pk.rows());
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (std::size_t i = 0; i < pq.rows(); ++i) {
    for (std::size_t j = 0; j < pk.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) dot += pq(i, c) * pk(j, c);
      s(i, j) = dot * scale;
    }
  }
  return naive_softmax_rows(s);
}

std::vector<int> top_count(const std::vector<double>& row, std::size_t count) {
  std::vector<int> keep(row.size(), 0);
  for (std::size_t t = 0; t < count && t < row.size(); ++t) {
    std::size_t best = row.size();
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (keep[j]) continue;
      if (best == row.size() || row[j] > row[best]) best = j;
    }
    keep[best] = 1;
  }
  return keep;
}

std::size_t min_subset_size_reaching(const std::vector<double>& row, double p, double slack) {
  const std::size_t n = row.size();
  if (n > 20) throw std::invalid_argument("min_subset_size_reaching: row too long");
  std::size_t best = n;
  for (std::uint32_t bits = 1; bits < (1u << n); ++bits) {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (bits & (1u << j)) {
        s += row[j];
        ++c;
      }
    }
    if (s >= p - slack) best = std::min(best, c);
  }
  return std::max<std::size_t>(best, 1);
}

std::vector<double> fd_grad_at(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                               const std::vector<std::size_t>& coords, double h) {
  std::vector<double> g;
  g.reserve(coords.size());
  for (std::size_t i : coords) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g.push_back((fp - fm) / (2.0 * h));
  }
  return g;
}

std::vector<double> fd_grad(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                            double h) {
  std::vector<std::size_t> all(x.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return fd_grad_at(f, std::move(x), all, h);
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  if (a.size() != b.size()) throw std::invalid_argument("rel_err: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace oracles
