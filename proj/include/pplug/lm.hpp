#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pplug/persona.hpp"
#include "pplug/tokenizer.hpp"
#include "pplug/transformer.hpp"

namespace pplug {

struct LMConfig {
  int d_lm = 32;
  int num_layers = 2;
  int num_heads = 4;
  int ffn_width = 64;
  int max_len = 256;
  int vocab_size = 0;

  TransformerConfig transformer() const;
};

struct LMParams {
  LMConfig cfg;
  TransformerParams net;

  std::uint64_t hash() const { return params_hash(net); }
};

LMParams init_lm(const LMConfig& cfg, Rng& rng);

enum class Segment { DEMO, INSTR, PERSONA, INPUT, TARGET };

// Embedding-level LM input [demo?; I; P; Emb(x); Emb(y_prefix)]. TARGET
// positions are a contiguous suffix holding the gold tokens; the gold at a
// TARGET position is predicted from the hidden state one position earlier.
struct PlugSequence {
  Matrix embeddings;  // T x d_lm
  std::vector<Segment> segments;
  std::vector<int> target_ids;  // aligned to TARGET positions
};

// Overflow policy: only x is truncated (from the right); throws if even a
// 1-token x does not fit.
PlugSequence assemble_input(const InstructionEmbedding* instr, const PersonalEmbedding* persona,
                            const std::vector<int>& x_ids, const std::vector<int>& y_prefix_ids,
                            const std::vector<int>* demo_ids, const LMParams& params);

double forward_loss(const LMParams& params, const PlugSequence& seq);

// Same loss; dEmb receives the grad wrt seq.embeddings (the trainable path
// into I, P and the input encoder). LM parameter grads are only accumulated
// when lm_grads is non-null (pretraining).
double forward_loss_backward(const LMParams& params, const PlugSequence& seq, Matrix& dEmb,
                             TransformerParams* lm_grads = nullptr);

// Log-probabilities of the next token after the given embedding prefix.
Vector next_token_logprobs(const LMParams& params, const Matrix& embeddings);

struct BeamConfig {
  int beam_size = 4;
  int max_new_tokens = 16;
  double length_penalty = 0.0;
  int eos_id = Tokenizer::kEos;
};

// Deterministic beam search; ranking by logp / len^penalty, ties by earlier
// finishing step then lexicographic token ids.
std::vector<int> generate_beam(const LMParams& params, const PlugSequence& prefix,
                               const BeamConfig& cfg);

struct LabelScore {
  int chosen = 0;  // index into the label set
  Vector logprobs;
};

// Total log-prob of each candidate's token ids appended as TARGET; ties keep
// the earlier label.
LabelScore score_labels(const LMParams& params, const PlugSequence& prefix,
                        const std::vector<std::vector<int>>& label_token_ids);

struct LMPretrainConfig {
  long steps = 600;
  int batch_size = 16;
  double lr = 1e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct LMPretrainReport {
  double final_loss = 0.0;
  double holdout_perplexity = 0.0;
};

// Next-token pretraining on [BOS tokens EOS] sequences.
LMParams pretrain_lm(const std::vector<std::string>& corpus, const Tokenizer& tok,
                     const LMConfig& cfg, const LMPretrainConfig& pcfg,
                     LMPretrainReport* report = nullptr);

}  // namespace pplug
