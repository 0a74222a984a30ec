#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "pplug/data.hpp"
#include "pplug/transformer.hpp"

namespace pplug {

enum class Pooling { first_token, mean };

struct EncoderConfig {
  int d_enc = 64;
  int num_layers = 2;
  int num_heads = 4;
  int ffn_width = 128;
  int max_len = 512;
  int vocab_size = 0;
  Pooling pooling = Pooling::mean;
  bool l2_normalize = false;  // raw dot products by default

  TransformerConfig transformer() const;
};

struct EncoderParams {
  EncoderConfig cfg;
  TransformerParams net;

  std::uint64_t hash() const { return params_hash(net); }
};

struct EncodedProfile {
  std::string user_id;
  Matrix rows;  // n x d_enc, row i encodes behavior i
  std::vector<std::string> behavior_ids;
  std::uint64_t producer_hash = 0;
};

// Persistent vector store keyed by (user_id, behavior_id, params_hash).
// Values are held in float32; a hit returns bitwise the stored vector.
class EmbeddingCache {
 public:
  std::optional<Vector> get(const std::string& user_id, const std::string& behavior_id,
                            std::uint64_t params_hash) const;
  void put(const std::string& user_id, const std::string& behavior_id,
           std::uint64_t params_hash, const Vector& v);

  // Directory layout: index.txt (key -> offset,count) + vectors.bin (LE f32).
  void save(const std::string& dir) const;
  static EmbeddingCache load(const std::string& dir);

  std::size_t size() const;

 private:
  mutable std::unique_ptr<std::shared_mutex> mu_ = std::make_unique<std::shared_mutex>();
  std::unordered_map<std::string, std::vector<float>> store_;
};

// Number of transformer forward passes done by this module (cache probes
// excluded); test instrumentation.
long encoder_forward_count();
void reset_encoder_forward_count();

EncoderParams init_encoder(const EncoderConfig& cfg, Rng& rng);

// Deterministic pooled embedding of `text`; truncated to cfg.max_len tokens,
// empty text encodes as a single <unk>. Output rounded to float32 so cached
// and fresh results agree bitwise.
Vector encode_text(const EncoderParams& params, const Tokenizer& tok, const std::string& text);

EncodedProfile encode_profile(const EncoderParams& frozen, const Tokenizer& tok,
                              const UserProfile& profile, EmbeddingCache* cache = nullptr);

// Trainable-path forward: full precision, keeps the tape for backprop.
struct EncoderTape {
  std::vector<int> ids;
  ForwardCache fc;
  Vector pooled;    // pre-normalization pooled vector
  Vector out;       // after optional normalization
};

Vector encode_input_forward(const EncoderParams& params, const Tokenizer& tok,
                            const std::string& text, EncoderTape& tape);

// d_out is the grad wrt the forward's return; accumulates into `grads`
// (including tok_emb rows through the input lookups).
void encode_input_backward(const EncoderParams& params, const EncoderTape& tape,
                           const Vector& d_out, TransformerParams& grads);

struct EncoderPretrainConfig {
  long steps = 400;
  int batch_size = 16;
  double lr = 1e-3;
  double mask_prob = 0.15;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct EncoderPretrainReport {
  double final_loss = 0.0;
  double holdout_masked_accuracy = 0.0;
};

// Masked-token-prediction pretraining (mask replaced by <unk>, originals
// predicted through the tied readout).
EncoderParams pretrain_encoder(const std::vector<std::string>& corpus, const Tokenizer& tok,
                               const EncoderConfig& cfg, const EncoderPretrainConfig& pcfg,
                               EncoderPretrainReport* report = nullptr);

inline EncoderParams clone_params(const EncoderParams& src) { return src; }

}  // namespace pplug
