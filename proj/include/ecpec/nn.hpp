#pragma once

// Small layers shared by the encoder, TSAM and span models. Every layer
// reads its weights from a ParameterStore under a name prefix.

#include "ecpec/autodiff.hpp"
#include "ecpec/params.hpp"

#include <string>
#include <vector>

namespace ecpec::nn {

// prefix.w (in x out), prefix.b (1 x out)
void init_linear(ParameterStore& store, const std::string& prefix, int in, int out, Rng& rng);
ad::Var linear(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var x);

// prefix.g, prefix.b (1 x dim)
void init_layer_norm(ParameterStore& store, const std::string& prefix, int dim);
ad::Var layer_norm(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var x);

// prefix.{q,k,v,o}.{w,b}
void init_attention(ParameterStore& store, const std::string& prefix, int dim, Rng& rng);

// Scaled dot-product attention with `n_heads` heads, scaling 1/sqrt(dim/n_heads).
// `allowed` (rows of query x rows of kv) masks keys; `weights`, when given,
// receives the per-head attention matrices.
ad::Var multi_head_attention(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var query,
                             ad::Var kv, int n_heads, const Mask* allowed = nullptr,
                             std::vector<Matrix>* weights = nullptr);

// Fixed sinusoidal position table (rows x dim).
Matrix sinusoidal_positions(int rows, int dim);

}  // namespace ecpec::nn
