#pragma once

#include <string>
#include <vector>

#include "pplug/encoder.hpp"

namespace pplug {

// 2-layer MLP from encoder space to LM embedding space, GELU in between.
struct ProjectorParams {
  Matrix W1;  // d_enc x d_hidden
  Vector b1;
  Matrix W2;  // d_hidden x d_lm
  Vector b2;

  int d_enc() const { return static_cast<int>(W1.rows()); }
  int d_hidden() const { return static_cast<int>(W1.cols()); }
  int d_lm() const { return static_cast<int>(W2.cols()); }
  std::vector<ParamView> views(const std::string& prefix = "proj.");
};

// d_hidden defaults to max(d_enc, d_lm); fan-in scaled init.
ProjectorParams init_projector(int d_enc, int d_lm, Rng& rng, int d_hidden = -1);

struct InstructionEmbedding {
  Matrix rows;  // m x d_lm soft tokens
  bool trainable = true;
  std::vector<ParamView> views(const std::string& prefix = "instr.");
};

// Small zero-mean noise (scale 0.02).
InstructionEmbedding init_instruction(int m, int d_lm, Rng& rng);

enum class PersonaVariant { attention, mean, topk };

struct PersonalEmbedding {
  Vector vector;   // d_lm
  Vector weights;  // n, aligned to EncodedProfile rows (zero outside a top-K selection)
  PersonaVariant variant = PersonaVariant::attention;
  int topk = 0;
};

// Softmax over x.h_i dot products, max-subtracted.
Vector attention_weights(const Vector& x_vec, const Matrix& rows);

Vector project(const ProjectorParams& proj, const Vector& h);

PersonalEmbedding personal_embedding(const EncodedProfile& profile_enc, const Vector& x_vec,
                                     const ProjectorParams& proj);
PersonalEmbedding personal_embedding_mean(const EncodedProfile& profile_enc,
                                          const ProjectorParams& proj);
PersonalEmbedding personal_embedding_topk(const EncodedProfile& profile_enc, const Vector& x_vec,
                                          const ProjectorParams& proj, int K);

// Indices of the K largest weights, ties broken by lower row index,
// ordered by decreasing weight.
std::vector<Eigen::Index> topk_indices(const Vector& weights, int K);

// Training-path aggregation with a tape for backprop.
struct PersonaTape {
  std::vector<Eigen::Index> selected;  // rows participating in the sum
  Vector weights_sel;                  // softmax over selected dots
  Matrix hidden_pre;                   // |sel| x d_hidden pre-activations
  Matrix projected;                    // |sel| x d_lm per-row projections
  bool input_aware = true;
};

PersonalEmbedding persona_forward(const EncodedProfile& profile_enc, const Vector* x_vec,
                                  const ProjectorParams& proj, PersonaVariant variant, int K,
                                  PersonaTape& tape);

// dP is the grad wrt the personal embedding; accumulates projector grads and
// returns the grad wrt x_vec (zero for the mean variant).
Vector persona_backward(const EncodedProfile& profile_enc, const ProjectorParams& proj,
                        const PersonaTape& tape, const Vector& dP, ProjectorParams& proj_grads);

// Binary export {u32 user_id length, bytes, u32 d_lm, LE f32 values}.
void write_personal_embedding(const std::string& path, const std::string& user_id,
                              const Vector& v);
struct ExportedEmbedding {
  std::string user_id;
  Vector vector;
};
ExportedEmbedding read_personal_embedding(const std::string& path);

}  // namespace pplug
