#include "pplug/persona.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace pplug {

std::vector<ParamView> ProjectorParams::views(const std::string& prefix) {
  return {
      {prefix + "W1", W1.data(), static_cast<std::size_t>(W1.size())},
      {prefix + "b1", b1.data(), static_cast<std::size_t>(b1.size())},
      {prefix + "W2", W2.data(), static_cast<std::size_t>(W2.size())},
      {prefix + "b2", b2.data(), static_cast<std::size_t>(b2.size())},
  };
}

ProjectorParams init_projector(int d_enc, int d_lm, Rng& rng, int d_hidden) {
  if (d_hidden <= 0) d_hidden = std::max(d_enc, d_lm);
  ProjectorParams p;
  double s1 = 1.0 / std::sqrt(static_cast<double>(d_enc));
  double s2 = 1.0 / std::sqrt(static_cast<double>(d_hidden));
  p.W1.resize(d_enc, d_hidden);
  p.W2.resize(d_hidden, d_lm);
  for (Eigen::Index j = 0; j < p.W1.cols(); ++j)
    for (Eigen::Index i = 0; i < p.W1.rows(); ++i) p.W1(i, j) = s1 * rng.normal();
  for (Eigen::Index j = 0; j < p.W2.cols(); ++j)
    for (Eigen::Index i = 0; i < p.W2.rows(); ++i) p.W2(i, j) = s2 * rng.normal();
  p.b1 = Vector::Zero(d_hidden);
  p.b2 = Vector::Zero(d_lm);
  for (auto& v : p.views())
    for (std::size_t i = 0; i < v.size; ++i) v.data[i] = round_f32(v.data[i]);
  return p;
}

std::vector<ParamView> InstructionEmbedding::views(const std::string& prefix) {
  return {{prefix + "rows", rows.data(), static_cast<std::size_t>(rows.size())}};
}

InstructionEmbedding init_instruction(int m, int d_lm, Rng& rng) {
  if (m < 1) throw std::invalid_argument("init_instruction: m must be >= 1");
  InstructionEmbedding instr;
  instr.rows.resize(m, d_lm);
  for (Eigen::Index j = 0; j < d_lm; ++j)
    for (Eigen::Index i = 0; i < m; ++i) instr.rows(i, j) = round_f32(0.02 * rng.normal());
  return instr;
}

namespace {

Vector softmax_stable(const Vector& dots) {
  double mx = dots.maxCoeff();
  Vector e = (dots.array() - mx).exp();
  return e / e.sum();
}

// Forward through the projector for one row, keeping pre-activations.
Vector project_with_tape(const ProjectorParams& proj, const Vector& h, Vector& pre) {
  pre = proj.W1.transpose() * h + proj.b1;
  Vector hid = pre.unaryExpr([](double u) { return gelu(u); });
  return proj.W2.transpose() * hid + proj.b2;
}

}  // namespace

Vector attention_weights(const Vector& x_vec, const Matrix& rows) {
  if (rows.rows() == 0) throw std::invalid_argument("attention_weights: empty profile");
  if (rows.cols() != x_vec.size())
    throw std::invalid_argument("attention_weights: width mismatch");
  return softmax_stable(rows * x_vec);
}

Vector project(const ProjectorParams& proj, const Vector& h) {
  if (h.size() != proj.W1.rows()) throw std::invalid_argument("project: width mismatch");
  Vector pre;
  Vector out = project_with_tape(proj, h, pre);
  if (!out.allFinite()) throw std::runtime_error("project: non-finite output");
  return out;
}

std::vector<Eigen::Index> topk_indices(const Vector& weights, int K) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(weights.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    return weights(a) > weights(b);  // stable keeps lower index on ties
  });
  if (K < static_cast<int>(idx.size())) idx.resize(static_cast<std::size_t>(K));
  return idx;
}

PersonalEmbedding persona_forward(const EncodedProfile& profile_enc, const Vector* x_vec,
                                  const ProjectorParams& proj, PersonaVariant variant, int K,
                                  PersonaTape& tape) {
  const Eigen::Index n = profile_enc.rows.rows();
  if (n == 0) throw std::invalid_argument("persona_forward: empty profile");

  PersonalEmbedding out;
  out.variant = variant;
  out.topk = K;

  if (variant == PersonaVariant::mean) {
    tape.input_aware = false;
    tape.selected.resize(static_cast<std::size_t>(n));
    std::iota(tape.selected.begin(), tape.selected.end(), 0);
    tape.weights_sel = Vector::Constant(n, 1.0 / static_cast<double>(n));
  } else {
    if (!x_vec) throw std::invalid_argument("persona_forward: variant needs x_vec");
    tape.input_aware = true;
    Vector w = attention_weights(*x_vec, profile_enc.rows);
    if (variant == PersonaVariant::topk && K < static_cast<int>(n)) {
      if (K < 1) throw std::invalid_argument("persona_forward: K must be >= 1");
      tape.selected = topk_indices(w, K);
      // Renormalized selection == softmax over the selected dots.
      Vector dots(static_cast<Eigen::Index>(tape.selected.size()));
      for (std::size_t i = 0; i < tape.selected.size(); ++i)
        dots(static_cast<Eigen::Index>(i)) =
            profile_enc.rows.row(tape.selected[i]).dot(*x_vec);
      tape.weights_sel = softmax_stable(dots);
    } else {
      tape.selected.resize(static_cast<std::size_t>(n));
      std::iota(tape.selected.begin(), tape.selected.end(), 0);
      tape.weights_sel = w;
    }
  }

  const Eigen::Index m = static_cast<Eigen::Index>(tape.selected.size());
  tape.hidden_pre.resize(m, proj.d_hidden());
  tape.projected.resize(m, proj.d_lm());
  out.vector = Vector::Zero(proj.d_lm());
  out.weights = Vector::Zero(n);
  for (Eigen::Index i = 0; i < m; ++i) {
    Vector pre;
    Vector pj = project_with_tape(proj, profile_enc.rows.row(tape.selected[i]).transpose(), pre);
    tape.hidden_pre.row(i) = pre.transpose();
    tape.projected.row(i) = pj.transpose();
    out.vector += tape.weights_sel(i) * pj;
    out.weights(tape.selected[i]) = tape.weights_sel(i);
  }
  if (!out.vector.allFinite()) throw std::runtime_error("persona_forward: non-finite embedding");
  return out;
}

PersonalEmbedding personal_embedding(const EncodedProfile& profile_enc, const Vector& x_vec,
                                     const ProjectorParams& proj) {
  PersonaTape tape;
  return persona_forward(profile_enc, &x_vec, proj, PersonaVariant::attention, 0, tape);
}

PersonalEmbedding personal_embedding_mean(const EncodedProfile& profile_enc,
                                          const ProjectorParams& proj) {
  PersonaTape tape;
  return persona_forward(profile_enc, nullptr, proj, PersonaVariant::mean, 0, tape);
}

PersonalEmbedding personal_embedding_topk(const EncodedProfile& profile_enc, const Vector& x_vec,
                                          const ProjectorParams& proj, int K) {
  PersonaTape tape;
  return persona_forward(profile_enc, &x_vec, proj, PersonaVariant::topk, K, tape);
}

Vector persona_backward(const EncodedProfile& profile_enc, const ProjectorParams& proj,
                        const PersonaTape& tape, const Vector& dP, ProjectorParams& proj_grads) {
  const Eigen::Index m = static_cast<Eigen::Index>(tape.selected.size());
  Vector dx = Vector::Zero(profile_enc.rows.cols());
  Vector d_weights(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vector h = profile_enc.rows.row(tape.selected[i]).transpose();
    // P += w_i * Proj(h_i): projector path
    Vector d_pj = tape.weights_sel(i) * dP;
    Vector hid = tape.hidden_pre.row(i).transpose().unaryExpr([](double u) { return gelu(u); });
    proj_grads.W2 += hid * d_pj.transpose();
    proj_grads.b2 += d_pj;
    Vector d_hid = proj.W2 * d_pj;
    Vector d_pre = d_hid.array() *
                   tape.hidden_pre.row(i).transpose().unaryExpr([](double u) {
                     return gelu_grad(u);
                   }).array();
    proj_grads.W1 += h * d_pre.transpose();
    proj_grads.b1 += d_pre;
    d_weights(i) = dP.dot(tape.projected.row(i).transpose());
  }
  if (tape.input_aware) {
    // softmax over selected dots; d dot_i -> x grad via h_i
    double dot = (d_weights.array() * tape.weights_sel.array()).sum();
    for (Eigen::Index i = 0; i < m; ++i) {
      double d_dot = (d_weights(i) - dot) * tape.weights_sel(i);
      dx += d_dot * profile_enc.rows.row(tape.selected[i]).transpose();
    }
  }
  return dx;
}

void write_personal_embedding(const std::string& path, const std::string& user_id,
                              const Vector& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_personal_embedding: cannot open " + path);
  std::uint32_t len = static_cast<std::uint32_t>(user_id.size());
  std::uint32_t d = static_cast<std::uint32_t>(v.size());
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(user_id.data(), len);
  os.write(reinterpret_cast<const char*>(&d), sizeof(d));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    float f = static_cast<float>(v(i));
    os.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
}

ExportedEmbedding read_personal_embedding(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_personal_embedding: cannot open " + path);
  std::uint32_t len = 0, d = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  ExportedEmbedding e;
  e.user_id.resize(len);
  is.read(e.user_id.data(), len);
  is.read(reinterpret_cast<char*>(&d), sizeof(d));
  e.vector.resize(d);
  for (std::uint32_t i = 0; i < d; ++i) {
    float f = 0;
    is.read(reinterpret_cast<char*>(&f), sizeof(f));
    e.vector(i) = static_cast<double>(f);
  }
  if (!is) throw std::runtime_error("read_personal_embedding: truncated file " + path);
  return e;
}

}  // namespace pplug
