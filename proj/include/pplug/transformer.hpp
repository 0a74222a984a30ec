#pragma once

#include <string>
#include <vector>

#include "pplug/common.hpp"

namespace pplug {

struct TransformerConfig {
  int d_model = 32;
  int num_layers = 2;
  int num_heads = 4;
  int ffn_width = 64;
  int max_len = 64;
  int vocab_size = 0;

  void validate() const;
};

struct LayerParams {
  Matrix Wq, Wk, Wv, Wo;  // d x d, row-vector convention y = x W + b
  Vector bq, bk, bv, bo;
  Matrix W1;  // d x ffn
  Vector b1;
  Matrix W2;  // ffn x d
  Vector b2;
  Vector ln1_g, ln1_b, ln2_g, ln2_b;
};

// Pre-LN transformer with GELU FFN and a readout tied to the token table.
struct TransformerParams {
  TransformerConfig cfg;
  Matrix tok_emb;  // vocab x d
  Matrix pos_emb;  // max_len x d
  std::vector<LayerParams> layers;
  Vector lnf_g, lnf_b;
};

struct ParamView {
  std::string name;
  double* data;
  std::size_t size;
};

std::vector<ParamView> param_views(TransformerParams& p);
std::vector<ParamView> param_views(const TransformerParams& p);  // data is const in spirit

TransformerParams init_transformer(const TransformerConfig& cfg, Rng& rng);
TransformerParams zeros_like(const TransformerParams& p);

// Digest of the float32 wire encoding of every array.
std::uint64_t params_hash(const TransformerParams& p);
void round_params_f32(TransformerParams& p);

struct LayerCache {
  Matrix x_in;
  Matrix ln1_out, ln2_out;
  Matrix ln1_xhat, ln2_xhat;
  Vector ln1_inv, ln2_inv;
  Matrix Q, K, V;
  std::vector<Matrix> attn_p;  // per-head T x T attention rows
  Matrix attn_concat;
  Matrix x_mid;
  Matrix ffn_u, ffn_h;
};

struct ForwardCache {
  Matrix x0;
  std::vector<LayerCache> layers;
  Matrix lnf_xhat;
  Vector lnf_inv;
  Matrix hidden;
  bool causal = false;
};

// `embeddings` is T x d *without* positional embeddings; they are added here.
// Returns final hidden states (T x d). Throws on non-finite activations,
// naming the layer.
Matrix transformer_forward(const TransformerParams& p, const Matrix& embeddings, bool causal,
                           ForwardCache* cache = nullptr);

// Backprop of dH (grad wrt final hidden states). Returns the grad wrt the
// input embeddings; accumulates parameter grads into `grads` when non-null
// (pos_emb and in-layer arrays; tok_emb is the caller's concern since lookups
// and the tied readout happen outside).
Matrix transformer_backward(const TransformerParams& p, const ForwardCache& cache,
                            const Matrix& dH, TransformerParams* grads);

// Log-softmax of hidden.row(t) * tok_emb^T.
Vector tied_logprobs(const TransformerParams& p, const Matrix& hidden, Eigen::Index t);

struct PositionTarget {
  Eigen::Index position;  // hidden row whose readout is scored
  int gold_id;
};

// Cross-entropy through the tied readout, mean over targets. When dHidden /
// d_tok_emb are non-null the corresponding grads are accumulated.
double tied_ce_loss(const TransformerParams& p, const Matrix& hidden,
                    const std::vector<PositionTarget>& targets, Matrix* dHidden,
                    Matrix* d_tok_emb);

Matrix embed_tokens(const TransformerParams& p, const std::vector<int>& ids);

}  // namespace pplug
