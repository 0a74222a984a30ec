#include "pplug/encoder.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "pplug/optim.hpp"

namespace pplug {

namespace {

std::atomic<long> g_forward_count{0};

std::string cache_key(const std::string& user_id, const std::string& behavior_id,
                      std::uint64_t params_hash) {
  return user_id + "\x1f" + behavior_id + "\x1f" + hex64(params_hash);
}

std::vector<int> tokenize_for_encoder(const EncoderConfig& cfg, const Tokenizer& tok,
                                      const std::string& text) {
  std::vector<int> ids = tok.encode(text);
  if (ids.empty()) ids.push_back(Tokenizer::kUnk);
  if (static_cast<int>(ids.size()) > cfg.max_len) ids.resize(static_cast<std::size_t>(cfg.max_len));
  return ids;
}

Vector pool(const EncoderConfig& cfg, const Matrix& hidden) {
  if (cfg.pooling == Pooling::first_token) return hidden.row(0).transpose();
  return hidden.colwise().mean().transpose();
}

}  // namespace

TransformerConfig EncoderConfig::transformer() const {
  TransformerConfig t;
  t.d_model = d_enc;
  t.num_layers = num_layers;
  t.num_heads = num_heads;
  t.ffn_width = ffn_width;
  t.max_len = max_len;
  t.vocab_size = vocab_size;
  return t;
}

long encoder_forward_count() { return g_forward_count.load(); }
void reset_encoder_forward_count() { g_forward_count.store(0); }

EncoderParams init_encoder(const EncoderConfig& cfg, Rng& rng) {
  if (cfg.d_enc % cfg.num_heads != 0)
    throw std::invalid_argument("EncoderConfig: d_enc not divisible by num_heads");
  if (cfg.max_len < 8) throw std::invalid_argument("EncoderConfig: max_len must be >= 8");
  EncoderParams p;
  p.cfg = cfg;
  p.net = init_transformer(cfg.transformer(), rng);
  return p;
}

Vector encode_text(const EncoderParams& params, const Tokenizer& tok, const std::string& text) {
  std::vector<int> ids = tokenize_for_encoder(params.cfg, tok, text);
  ++g_forward_count;
  Matrix hidden = transformer_forward(params.net, embed_tokens(params.net, ids), false);
  Vector v = pool(params.cfg, hidden);
  if (params.cfg.l2_normalize) {
    double n = v.norm();
    if (n > 0) v /= n;
  }
  round_f32_inplace(v);
  return v;
}

EncodedProfile encode_profile(const EncoderParams& frozen, const Tokenizer& tok,
                              const UserProfile& profile, EmbeddingCache* cache) {
  EncodedProfile out;
  out.user_id = profile.user_id;
  out.producer_hash = frozen.hash();
  out.rows.resize(static_cast<Eigen::Index>(profile.behaviors.size()), frozen.cfg.d_enc);
  for (std::size_t i = 0; i < profile.behaviors.size(); ++i) {
    const auto& b = profile.behaviors[i];
    out.behavior_ids.push_back(b.behavior_id);
    Vector v;
    std::optional<Vector> hit;
    if (cache) hit = cache->get(profile.user_id, b.behavior_id, out.producer_hash);
    if (hit) {
      v = std::move(*hit);
    } else {
      v = encode_text(frozen, tok, b.text);
      if (cache) {
        try {
          cache->put(profile.user_id, b.behavior_id, out.producer_hash, v);
        } catch (const std::exception& e) {
          std::cerr << "encode_profile: cache store failed: " << e.what() << "\n";
        }
      }
    }
    out.rows.row(static_cast<Eigen::Index>(i)) = v.transpose();
  }
  return out;
}

std::optional<Vector> EmbeddingCache::get(const std::string& user_id,
                                          const std::string& behavior_id,
                                          std::uint64_t params_hash) const {
  std::shared_lock lock(*mu_);
  auto it = store_.find(cache_key(user_id, behavior_id, params_hash));
  if (it == store_.end()) return std::nullopt;
  Vector v(static_cast<Eigen::Index>(it->second.size()));
  for (std::size_t i = 0; i < it->second.size(); ++i)
    v(static_cast<Eigen::Index>(i)) = static_cast<double>(it->second[i]);
  return v;
}

void EmbeddingCache::put(const std::string& user_id, const std::string& behavior_id,
                         std::uint64_t params_hash, const Vector& v) {
  std::vector<float> f(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) f[static_cast<std::size_t>(i)] =
      static_cast<float>(v(i));
  std::unique_lock lock(*mu_);
  store_[cache_key(user_id, behavior_id, params_hash)] = std::move(f);
}

std::size_t EmbeddingCache::size() const {
  std::shared_lock lock(*mu_);
  return store_.size();
}

void EmbeddingCache::save(const std::string& dir) const {
  std::shared_lock lock(*mu_);
  std::filesystem::create_directories(dir);
  std::ofstream idx(dir + "/index.txt", std::ios::binary);
  std::ofstream bin(dir + "/vectors.bin", std::ios::binary);
  if (!idx || !bin) throw std::runtime_error("EmbeddingCache::save: cannot open files in " + dir);
  std::size_t offset = 0;
  // Deterministic order
  std::vector<const std::pair<const std::string, std::vector<float>>*> entries;
  for (const auto& kv : store_) entries.push_back(&kv);
  std::sort(entries.begin(), entries.end(),
            [](const auto* a, const auto* b) { return a->first < b->first; });
  for (const auto* kv : entries) {
    idx << kv->first << '\t' << offset << '\t' << kv->second.size() << '\n';
    bin.write(reinterpret_cast<const char*>(kv->second.data()),
              static_cast<std::streamsize>(kv->second.size() * sizeof(float)));
    offset += kv->second.size();
  }
}

EmbeddingCache EmbeddingCache::load(const std::string& dir) {
  EmbeddingCache c;
  std::ifstream idx(dir + "/index.txt", std::ios::binary);
  std::ifstream bin(dir + "/vectors.bin", std::ios::binary);
  if (!idx || !bin) throw std::runtime_error("EmbeddingCache::load: cannot open files in " + dir);
  std::string line;
  while (std::getline(idx, line)) {
    std::istringstream ls(line);
    std::string key;
    std::size_t offset = 0, count = 0;
    if (!std::getline(ls, key, '\t') || !(ls >> offset >> count))
      throw std::runtime_error("EmbeddingCache::load: malformed index line");
    std::vector<float> f(count);
    bin.seekg(static_cast<std::streamoff>(offset * sizeof(float)));
    bin.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!bin) throw std::runtime_error("EmbeddingCache::load: truncated vectors.bin");
    c.store_[key] = std::move(f);
  }
  return c;
}

Vector encode_input_forward(const EncoderParams& params, const Tokenizer& tok,
                            const std::string& text, EncoderTape& tape) {
  tape.ids = tokenize_for_encoder(params.cfg, tok, text);
  ++g_forward_count;
  Matrix hidden = transformer_forward(params.net, embed_tokens(params.net, tape.ids), false,
                                      &tape.fc);
  tape.pooled = pool(params.cfg, hidden);
  tape.out = tape.pooled;
  if (params.cfg.l2_normalize) {
    double n = tape.pooled.norm();
    if (n > 0) tape.out = tape.pooled / n;
  }
  return tape.out;
}

void encode_input_backward(const EncoderParams& params, const EncoderTape& tape,
                           const Vector& d_out, TransformerParams& grads) {
  Vector d_pooled = d_out;
  if (params.cfg.l2_normalize) {
    double n = tape.pooled.norm();
    if (n > 0) {
      Vector v = tape.pooled / n;
      d_pooled = (d_out - v * v.dot(d_out)) / n;
    }
  }
  const Eigen::Index T = static_cast<Eigen::Index>(tape.ids.size());
  Matrix dH = Matrix::Zero(T, params.cfg.d_enc);
  if (params.cfg.pooling == Pooling::first_token) {
    dH.row(0) = d_pooled.transpose();
  } else {
    for (Eigen::Index t = 0; t < T; ++t)
      dH.row(t) = d_pooled.transpose() / static_cast<double>(T);
  }
  Matrix d_in = transformer_backward(params.net, tape.fc, dH, &grads);
  for (std::size_t i = 0; i < tape.ids.size(); ++i)
    grads.tok_emb.row(tape.ids[i]) += d_in.row(static_cast<Eigen::Index>(i));
}

EncoderParams pretrain_encoder(const std::vector<std::string>& corpus, const Tokenizer& tok,
                               const EncoderConfig& cfg, const EncoderPretrainConfig& pcfg,
                               EncoderPretrainReport* report) {
  if (corpus.empty()) throw std::runtime_error("pretrain_encoder: empty corpus");
  Rng rng(pcfg.seed ^ 0xe27c0de1ULL);
  EncoderParams params = init_encoder(cfg, rng);

  std::vector<std::vector<int>> seqs;
  for (const auto& line : corpus) seqs.push_back(tokenize_for_encoder(cfg, tok, line));
  std::size_t holdout =
      std::max<std::size_t>(1, static_cast<std::size_t>(pcfg.holdout_fraction *
                                                        static_cast<double>(seqs.size())));
  if (holdout >= seqs.size()) holdout = seqs.size() > 1 ? seqs.size() - 1 : 0;
  std::size_t train_n = seqs.size() - holdout;
  if (train_n == 0) throw std::runtime_error("pretrain_encoder: corpus too small");

  AdamW opt;
  double last_loss = 0.0;
  for (long step = 0; step < pcfg.steps; ++step) {
    TransformerParams grads = zeros_like(params.net);
    double loss = 0.0;
    int used = 0;
    for (int b = 0; b < pcfg.batch_size; ++b) {
      const auto& seq = seqs[rng.below(train_n)];
      std::vector<int> masked = seq;
      std::vector<PositionTarget> targets;
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (rng.uniform() < pcfg.mask_prob) {
          targets.push_back({static_cast<Eigen::Index>(i), seq[i]});
          masked[i] = Tokenizer::kUnk;
        }
      }
      if (targets.empty()) {
        std::size_t i = rng.below(seq.size());
        targets.push_back({static_cast<Eigen::Index>(i), seq[i]});
        masked[i] = Tokenizer::kUnk;
      }
      ForwardCache fc;
      Matrix hidden = transformer_forward(params.net, embed_tokens(params.net, masked), false, &fc);
      Matrix dHidden = Matrix::Zero(hidden.rows(), hidden.cols());
      loss += tied_ce_loss(params.net, hidden, targets, &dHidden, &grads.tok_emb);
      Matrix d_in = transformer_backward(params.net, fc, dHidden, &grads);
      for (std::size_t i = 0; i < masked.size(); ++i)
        grads.tok_emb.row(masked[i]) += d_in.row(static_cast<Eigen::Index>(i));
      ++used;
    }
    loss /= used;
    if (!std::isfinite(loss))
      throw std::runtime_error("pretrain_encoder: divergence at step " + std::to_string(step));
    for (auto& v : param_views(grads))
      for (std::size_t i = 0; i < v.size; ++i) v.data[i] /= used;
    auto gv = param_views(grads);
    clip_global_norm(gv, 1.0);
    opt.step(param_views(params.net), gv, lr_at(step, pcfg.steps, pcfg.lr, 0.05));
    last_loss = loss;
  }

  // Held-out masked accuracy with a fixed evaluation masking.
  Rng eval_rng(pcfg.seed ^ 0xe7a1ULL);
  long correct = 0, total = 0;
  for (std::size_t si = train_n; si < seqs.size(); ++si) {
    const auto& seq = seqs[si];
    std::vector<int> masked = seq;
    std::vector<PositionTarget> targets;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (eval_rng.uniform() < pcfg.mask_prob || (targets.empty() && i + 1 == seq.size())) {
        targets.push_back({static_cast<Eigen::Index>(i), seq[i]});
        masked[i] = Tokenizer::kUnk;
      }
    }
    Matrix hidden = transformer_forward(params.net, embed_tokens(params.net, masked), false);
    for (const auto& tgt : targets) {
      Vector lp = tied_logprobs(params.net, hidden, tgt.position);
      Eigen::Index argmax = 0;
      lp.maxCoeff(&argmax);
      if (static_cast<int>(argmax) == tgt.gold_id) ++correct;
      ++total;
    }
  }
  if (report) {
    report->final_loss = last_loss;
    report->holdout_masked_accuracy =
        total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }
  round_params_f32(params.net);
  return params;
}

}  // namespace pplug
