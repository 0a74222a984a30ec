#include "pplug/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace pplug {

namespace {

constexpr double kLnEps = 1e-5;

// y = gamma .* xhat + beta, row-wise. Caches xhat and 1/std per row.
Matrix layer_norm(const Matrix& x, const Vector& gamma, const Vector& beta, Matrix& xhat,
                  Vector& inv) {
  const Eigen::Index T = x.rows(), d = x.cols();
  xhat.resize(T, d);
  inv.resize(T);
  Matrix y(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    double mu = x.row(t).mean();
    double var = (x.row(t).array() - mu).square().mean();
    double iv = 1.0 / std::sqrt(var + kLnEps);
    inv(t) = iv;
    xhat.row(t) = (x.row(t).array() - mu) * iv;
    y.row(t) = xhat.row(t).array() * gamma.transpose().array() + beta.transpose().array();
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& inv,
                           const Vector& gamma, Vector* dgamma, Vector* dbeta) {
  const Eigen::Index T = dy.rows(), d = dy.cols();
  Matrix dx(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    Eigen::RowVectorXd dxhat = dy.row(t).array() * gamma.transpose().array();
    double m1 = dxhat.mean();
    double m2 = (dxhat.array() * xhat.row(t).array()).mean();
    dx.row(t) = inv(t) * (dxhat.array() - m1 - xhat.row(t).array() * m2);
  }
  if (dgamma) *dgamma += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  if (dbeta) *dbeta += dy.colwise().sum().transpose();
  return dx;
}

void check_finite(const Matrix& m, const std::string& where) {
  if (!m.allFinite()) throw std::runtime_error("non-finite activation in " + where);
}

Matrix rand_matrix(Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace

void TransformerConfig::validate() const {
  if (d_model <= 0 || num_layers <= 0 || num_heads <= 0 || ffn_width <= 0 || max_len < 8 ||
      vocab_size < 4)
    throw std::invalid_argument("TransformerConfig: bad dimensions");
  if (d_model % num_heads != 0)
    throw std::invalid_argument("TransformerConfig: d_model not divisible by num_heads");
}

TransformerParams init_transformer(const TransformerConfig& cfg, Rng& rng) {
  cfg.validate();
  TransformerParams p;
  p.cfg = cfg;
  const int d = cfg.d_model, f = cfg.ffn_width;
  p.tok_emb = rand_matrix(cfg.vocab_size, d, 0.02, rng);
  p.pos_emb = rand_matrix(cfg.max_len, d, 0.01, rng);
  double s_d = 1.0 / std::sqrt(static_cast<double>(d));
  double s_f = 1.0 / std::sqrt(static_cast<double>(f));
  for (int l = 0; l < cfg.num_layers; ++l) {
    LayerParams lp;
    lp.Wq = rand_matrix(d, d, s_d, rng);
    lp.Wk = rand_matrix(d, d, s_d, rng);
    lp.Wv = rand_matrix(d, d, s_d, rng);
    lp.Wo = rand_matrix(d, d, s_d, rng);
    lp.bq = Vector::Zero(d);
    lp.bk = Vector::Zero(d);
    lp.bv = Vector::Zero(d);
    lp.bo = Vector::Zero(d);
    lp.W1 = rand_matrix(d, f, s_d, rng);
    lp.b1 = Vector::Zero(f);
    lp.W2 = rand_matrix(f, d, s_f, rng);
    lp.b2 = Vector::Zero(d);
    lp.ln1_g = Vector::Ones(d);
    lp.ln1_b = Vector::Zero(d);
    lp.ln2_g = Vector::Ones(d);
    lp.ln2_b = Vector::Zero(d);
    p.layers.push_back(std::move(lp));
  }
  p.lnf_g = Vector::Ones(d);
  p.lnf_b = Vector::Zero(d);
  round_params_f32(p);
  return p;
}

TransformerParams zeros_like(const TransformerParams& src) {
  TransformerParams p = src;
  for (auto& v : param_views(p)) std::fill(v.data, v.data + v.size, 0.0);
  return p;
}

std::vector<ParamView> param_views(TransformerParams& p) {
  std::vector<ParamView> out;
  auto add_m = [&](const std::string& name, Matrix& m) {
    out.push_back({name, m.data(), static_cast<std::size_t>(m.size())});
  };
  auto add_v = [&](const std::string& name, Vector& v) {
    out.push_back({name, v.data(), static_cast<std::size_t>(v.size())});
  };
  add_m("tok_emb", p.tok_emb);
  add_m("pos_emb", p.pos_emb);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    std::string pre = "layer" + std::to_string(l) + ".";
    add_m(pre + "Wq", L.Wq);
    add_m(pre + "Wk", L.Wk);
    add_m(pre + "Wv", L.Wv);
    add_m(pre + "Wo", L.Wo);
    add_v(pre + "bq", L.bq);
    add_v(pre + "bk", L.bk);
    add_v(pre + "bv", L.bv);
    add_v(pre + "bo", L.bo);
    add_m(pre + "W1", L.W1);
    add_v(pre + "b1", L.b1);
    add_m(pre + "W2", L.W2);
    add_v(pre + "b2", L.b2);
    add_v(pre + "ln1_g", L.ln1_g);
    add_v(pre + "ln1_b", L.ln1_b);
    add_v(pre + "ln2_g", L.ln2_g);
    add_v(pre + "ln2_b", L.ln2_b);
  }
  add_v("lnf_g", p.lnf_g);
  add_v("lnf_b", p.lnf_b);
  return out;
}

std::vector<ParamView> param_views(const TransformerParams& p) {
  return param_views(const_cast<TransformerParams&>(p));
}

std::uint64_t params_hash(const TransformerParams& p) {
  Fnv1a h;
  for (const auto& v : param_views(p)) {
    h.update(v.name.data(), v.name.size());
    h.update_f32(v.data, v.size);
  }
  return h.digest();
}

void round_params_f32(TransformerParams& p) {
  for (auto& v : param_views(p))
    for (std::size_t i = 0; i < v.size; ++i) v.data[i] = round_f32(v.data[i]);
}

Matrix transformer_forward(const TransformerParams& p, const Matrix& embeddings, bool causal,
                           ForwardCache* cache) {
  const auto& cfg = p.cfg;
  const Eigen::Index T = embeddings.rows();
  const int d = cfg.d_model, H = cfg.num_heads, dh = d / H;
  if (embeddings.cols() != d) throw std::invalid_argument("transformer_forward: width mismatch");
  if (T > cfg.max_len) throw std::invalid_argument("transformer_forward: sequence too long");
  if (T == 0) throw std::invalid_argument("transformer_forward: empty sequence");

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.causal = causal;
  c.layers.assign(p.layers.size(), {});

  Matrix x = embeddings + p.pos_emb.topRows(T);
  c.x0 = x;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& lc = c.layers[l];
    lc.x_in = x;
    lc.ln1_out = layer_norm(x, L.ln1_g, L.ln1_b, lc.ln1_xhat, lc.ln1_inv);
    lc.Q = (lc.ln1_out * L.Wq).rowwise() + L.bq.transpose();
    lc.K = (lc.ln1_out * L.Wk).rowwise() + L.bk.transpose();
    lc.V = (lc.ln1_out * L.Wv).rowwise() + L.bv.transpose();
    lc.attn_p.assign(static_cast<std::size_t>(H), Matrix());
    lc.attn_concat.resize(T, d);
    for (int h = 0; h < H; ++h) {
      auto Qh = lc.Q.middleCols(h * dh, dh);
      auto Kh = lc.K.middleCols(h * dh, dh);
      auto Vh = lc.V.middleCols(h * dh, dh);
      Matrix S = (Qh * Kh.transpose()) * scale;
      if (causal) {
        for (Eigen::Index i = 0; i < T; ++i)
          for (Eigen::Index j = i + 1; j < T; ++j) S(i, j) = -1e30;
      }
      Matrix& P = lc.attn_p[static_cast<std::size_t>(h)];
      P.resize(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        double mx = S.row(i).maxCoeff();
        Eigen::RowVectorXd e = (S.row(i).array() - mx).exp();
        P.row(i) = e / e.sum();
      }
      lc.attn_concat.middleCols(h * dh, dh) = P * Vh;
    }
    lc.x_mid = x + ((lc.attn_concat * L.Wo).rowwise() + L.bo.transpose());
    lc.ln2_out = layer_norm(lc.x_mid, L.ln2_g, L.ln2_b, lc.ln2_xhat, lc.ln2_inv);
    lc.ffn_u = (lc.ln2_out * L.W1).rowwise() + L.b1.transpose();
    lc.ffn_h = lc.ffn_u.unaryExpr([](double u) { return gelu(u); });
    x = lc.x_mid + ((lc.ffn_h * L.W2).rowwise() + L.b2.transpose());
    check_finite(x, "layer " + std::to_string(l));
  }
  c.hidden = layer_norm(x, p.lnf_g, p.lnf_b, c.lnf_xhat, c.lnf_inv);
  check_finite(c.hidden, "final layer norm");
  return c.hidden;
}

Matrix transformer_backward(const TransformerParams& p, const ForwardCache& c, const Matrix& dH,
                            TransformerParams* grads) {
  const auto& cfg = p.cfg;
  const Eigen::Index T = c.x0.rows();
  const int d = cfg.d_model, H = cfg.num_heads, dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dx = layer_norm_backward(dH, c.lnf_xhat, c.lnf_inv, p.lnf_g,
                                  grads ? &grads->lnf_g : nullptr,
                                  grads ? &grads->lnf_b : nullptr);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& L = p.layers[li];
    const auto& lc = c.layers[li];
    LayerParams* G = grads ? &grads->layers[li] : nullptr;

    // FFN branch: x = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2
    Matrix d_ffn_h = dx * L.W2.transpose();
    if (G) {
      G->W2 += lc.ffn_h.transpose() * dx;
      G->b2 += dx.colwise().sum().transpose();
    }
    Matrix d_ffn_u =
        d_ffn_h.array() * lc.ffn_u.unaryExpr([](double u) { return gelu_grad(u); }).array();
    Matrix d_ln2 = d_ffn_u * L.W1.transpose();
    if (G) {
      G->W1 += lc.ln2_out.transpose() * d_ffn_u;
      G->b1 += d_ffn_u.colwise().sum().transpose();
    }
    Matrix dx_mid = dx + layer_norm_backward(d_ln2, lc.ln2_xhat, lc.ln2_inv, L.ln2_g,
                                             G ? &G->ln2_g : nullptr, G ? &G->ln2_b : nullptr);

    // Attention branch: x_mid = x_in + attn_concat Wo + bo
    Matrix d_concat = dx_mid * L.Wo.transpose();
    if (G) {
      G->Wo += lc.attn_concat.transpose() * dx_mid;
      G->bo += dx_mid.colwise().sum().transpose();
    }
    Matrix dQ = Matrix::Zero(T, d), dK = Matrix::Zero(T, d), dV = Matrix::Zero(T, d);
    for (int h = 0; h < H; ++h) {
      auto Kh = lc.K.middleCols(h * dh, dh);
      auto Qh = lc.Q.middleCols(h * dh, dh);
      auto Vh = lc.V.middleCols(h * dh, dh);
      const Matrix& P = lc.attn_p[static_cast<std::size_t>(h)];
      Matrix dOh = d_concat.middleCols(h * dh, dh);
      Matrix dP = dOh * Vh.transpose();
      dV.middleCols(h * dh, dh) = P.transpose() * dOh;
      // softmax rows backward
      Matrix dS(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        double dot = (dP.row(i).array() * P.row(i).array()).sum();
        dS.row(i) = (dP.row(i).array() - dot) * P.row(i).array();
      }
      dQ.middleCols(h * dh, dh) = (dS * Kh) * scale;
      dK.middleCols(h * dh, dh) = (dS.transpose() * Qh) * scale;
    }
    Matrix d_ln1 = dQ * L.Wq.transpose() + dK * L.Wk.transpose() + dV * L.Wv.transpose();
    if (G) {
      G->Wq += lc.ln1_out.transpose() * dQ;
      G->Wk += lc.ln1_out.transpose() * dK;
      G->Wv += lc.ln1_out.transpose() * dV;
      G->bq += dQ.colwise().sum().transpose();
      G->bk += dK.colwise().sum().transpose();
      G->bv += dV.colwise().sum().transpose();
    }
    dx = dx_mid + layer_norm_backward(d_ln1, lc.ln1_xhat, lc.ln1_inv, L.ln1_g,
                                      G ? &G->ln1_g : nullptr, G ? &G->ln1_b : nullptr);
  }
  if (grads) grads->pos_emb.topRows(T) += dx;
  return dx;
}

Vector tied_logprobs(const TransformerParams& p, const Matrix& hidden, Eigen::Index t) {
  Vector logits = p.tok_emb * hidden.row(t).transpose();
  double mx = logits.maxCoeff();
  double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

double tied_ce_loss(const TransformerParams& p, const Matrix& hidden,
                    const std::vector<PositionTarget>& targets, Matrix* dHidden,
                    Matrix* d_tok_emb) {
  if (targets.empty()) throw std::invalid_argument("tied_ce_loss: no targets");
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(targets.size());
  for (const auto& tg : targets) {
    Vector logits = p.tok_emb * hidden.row(tg.position).transpose();
    double mx = logits.maxCoeff();
    Vector probs = (logits.array() - mx).exp();
    double z = probs.sum();
    probs /= z;
    double lp = logits(tg.gold_id) - (mx + std::log(z));
    loss -= lp * inv_n;
    if (dHidden || d_tok_emb) {
      Vector dlogits = probs * inv_n;
      dlogits(tg.gold_id) -= inv_n;
      if (dHidden) dHidden->row(tg.position) += dlogits.transpose() * p.tok_emb;
      if (d_tok_emb) *d_tok_emb += dlogits * hidden.row(tg.position);
    }
  }
  if (!std::isfinite(loss)) throw std::runtime_error("tied_ce_loss: non-finite loss");
  return loss;
}

Matrix embed_tokens(const TransformerParams& p, const std::vector<int>& ids) {
  Matrix m(static_cast<Eigen::Index>(ids.size()), p.cfg.d_model);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= p.cfg.vocab_size)
      throw std::out_of_range("embed_tokens: token id out of range");
    m.row(static_cast<Eigen::Index>(i)) = p.tok_emb.row(id);
  }
  return m;
}

}  // namespace pplug
