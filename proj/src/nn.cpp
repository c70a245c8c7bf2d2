#include "ecpec/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ecpec::nn {

void init_linear(ParameterStore& store, const std::string& prefix, int in, int out, Rng& rng) {
  store.init_xavier(prefix + ".w", in, out, rng);
  store.init_constant(prefix + ".b", 1, out, 0.0);
}

ad::Var linear(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var x) {
  return ad::add_row(ad::matmul(x, g.parameter(store, prefix + ".w")), g.parameter(store, prefix + ".b"));
}

void init_layer_norm(ParameterStore& store, const std::string& prefix, int dim) {
  store.init_constant(prefix + ".g", 1, dim, 1.0);
  store.init_constant(prefix + ".b", 1, dim, 0.0);
}

ad::Var layer_norm(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var x) {
  return ad::layer_norm_rows(x, g.parameter(store, prefix + ".g"), g.parameter(store, prefix + ".b"));
}

void init_attention(ParameterStore& store, const std::string& prefix, int dim, Rng& rng) {
  for (const char* p : {".q", ".k", ".v", ".o"}) init_linear(store, prefix + p, dim, dim, rng);
}

ad::Var multi_head_attention(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var query,
                             ad::Var kv, int n_heads, const Mask* allowed, std::vector<Matrix>* weights) {
  const auto dim = query.cols();
  if (n_heads < 1 || dim % n_heads != 0) throw std::invalid_argument("multi_head_attention: dim not divisible by heads");
  if (allowed && (allowed->rows() != query.rows() || allowed->cols() != kv.rows()))
    throw std::invalid_argument("multi_head_attention: mask shape mismatch");
  const auto head_dim = dim / n_heads;
  const double scaling = 1.0 / std::sqrt(static_cast<double>(head_dim));

  ad::Var q = linear(g, store, prefix + ".q", query);
  ad::Var k = linear(g, store, prefix + ".k", kv);
  ad::Var v = linear(g, store, prefix + ".v", kv);
  std::vector<ad::Var> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  if (weights) weights->clear();
  for (int h = 0; h < n_heads; ++h) {
    ad::Var qh = ad::slice_cols(q, h * head_dim, head_dim);
    ad::Var kh = ad::slice_cols(k, h * head_dim, head_dim);
    ad::Var vh = ad::slice_cols(v, h * head_dim, head_dim);
    ad::Var scores = ad::scale(ad::matmul_nt(qh, kh), scaling);
    ad::Var attn = allowed ? ad::softmax_rows(scores, *allowed) : ad::softmax_rows(scores);
    if (weights) weights->push_back(attn.value());
    heads.push_back(ad::matmul(attn, vh));
  }
  ad::Var merged = n_heads == 1 ? heads[0] : ad::concat_cols(heads);
  return linear(g, store, prefix + ".o", merged);
}

Matrix sinusoidal_positions(int rows, int dim) {
  Matrix p(rows, dim);
  for (int pos = 0; pos < rows; ++pos)
    for (int i = 0; i < dim; ++i) {
      double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      p(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return p;
}

}  // namespace ecpec::nn
