#include "pplug/lm.hpp"

#include <algorithm>
#include <stdexcept>

#include "pplug/optim.hpp"

namespace pplug {

TransformerConfig LMConfig::transformer() const {
  TransformerConfig t;
  t.d_model = d_lm;
  t.num_layers = num_layers;
  t.num_heads = num_heads;
  t.ffn_width = ffn_width;
  t.max_len = max_len;
  t.vocab_size = vocab_size;
  return t;
}

LMParams init_lm(const LMConfig& cfg, Rng& rng) {
  if (cfg.d_lm % cfg.num_heads != 0)
    throw std::invalid_argument("LMConfig: d_lm not divisible by num_heads");
  LMParams p;
  p.cfg = cfg;
  p.net = init_transformer(cfg.transformer(), rng);
  return p;
}

PlugSequence assemble_input(const InstructionEmbedding* instr, const PersonalEmbedding* persona,
                            const std::vector<int>& x_ids, const std::vector<int>& y_prefix_ids,
                            const std::vector<int>* demo_ids, const LMParams& params) {
  const int d = params.cfg.d_lm;
  const Eigen::Index demo_n = demo_ids ? static_cast<Eigen::Index>(demo_ids->size()) : 0;
  const Eigen::Index m = instr ? instr->rows.rows() : 0;
  const Eigen::Index p_n = persona ? 1 : 0;
  const Eigen::Index y_n = static_cast<Eigen::Index>(y_prefix_ids.size());
  const Eigen::Index fixed = demo_n + m + p_n + y_n;
  Eigen::Index x_n = static_cast<Eigen::Index>(x_ids.size());
  if (fixed + 1 > params.cfg.max_len)
    throw std::runtime_error("assemble_input: sequence overflows even with 1 input token");
  if (fixed + x_n > params.cfg.max_len) x_n = params.cfg.max_len - fixed;
  if (x_n < 1 && !x_ids.empty())
    throw std::runtime_error("assemble_input: no room for input tokens");

  PlugSequence seq;
  seq.embeddings.resize(fixed + x_n, d);
  Eigen::Index pos = 0;
  if (demo_ids) {
    for (int id : *demo_ids) {
      seq.embeddings.row(pos++) = params.net.tok_emb.row(id);
      seq.segments.push_back(Segment::DEMO);
    }
  }
  if (instr) {
    for (Eigen::Index i = 0; i < m; ++i) {
      seq.embeddings.row(pos++) = instr->rows.row(i);
      seq.segments.push_back(Segment::INSTR);
    }
  }
  if (persona) {
    seq.embeddings.row(pos++) = persona->vector.transpose();
    seq.segments.push_back(Segment::PERSONA);
  }
  for (Eigen::Index i = 0; i < x_n; ++i) {
    seq.embeddings.row(pos++) = params.net.tok_emb.row(x_ids[static_cast<std::size_t>(i)]);
    seq.segments.push_back(Segment::INPUT);
  }
  for (int id : y_prefix_ids) {
    seq.embeddings.row(pos++) = params.net.tok_emb.row(id);
    seq.segments.push_back(Segment::TARGET);
    seq.target_ids.push_back(id);
  }
  return seq;
}

namespace {

std::vector<PositionTarget> target_positions(const PlugSequence& seq) {
  const Eigen::Index T = seq.embeddings.rows();
  Eigen::Index first_target = T;
  for (Eigen::Index t = 0; t < T; ++t) {
    if (seq.segments[static_cast<std::size_t>(t)] == Segment::TARGET) {
      first_target = t;
      break;
    }
  }
  for (Eigen::Index t = first_target; t < T; ++t)
    if (seq.segments[static_cast<std::size_t>(t)] != Segment::TARGET)
      throw std::invalid_argument("forward_loss: TARGET positions must be a contiguous suffix");
  if (first_target == T) throw std::invalid_argument("forward_loss: sequence has no TARGET");
  if (first_target == 0) throw std::invalid_argument("forward_loss: TARGET has no context");
  if (seq.target_ids.size() != static_cast<std::size_t>(T - first_target))
    throw std::invalid_argument("forward_loss: target_ids misaligned");
  std::vector<PositionTarget> targets;
  for (Eigen::Index t = first_target; t < T; ++t)
    targets.push_back({t - 1, seq.target_ids[static_cast<std::size_t>(t - first_target)]});
  return targets;
}

}  // namespace

double forward_loss(const LMParams& params, const PlugSequence& seq) {
  auto targets = target_positions(seq);
  Matrix hidden = transformer_forward(params.net, seq.embeddings, true);
  return tied_ce_loss(params.net, hidden, targets, nullptr, nullptr);
}

double forward_loss_backward(const LMParams& params, const PlugSequence& seq, Matrix& dEmb,
                             TransformerParams* lm_grads) {
  auto targets = target_positions(seq);
  ForwardCache fc;
  Matrix hidden = transformer_forward(params.net, seq.embeddings, true, &fc);
  Matrix dHidden = Matrix::Zero(hidden.rows(), hidden.cols());
  double loss = tied_ce_loss(params.net, hidden, targets, &dHidden,
                             lm_grads ? &lm_grads->tok_emb : nullptr);
  dEmb = transformer_backward(params.net, fc, dHidden, lm_grads);
  return loss;
}

Vector next_token_logprobs(const LMParams& params, const Matrix& embeddings) {
  Matrix hidden = transformer_forward(params.net, embeddings, true);
  return tied_logprobs(params.net, hidden, hidden.rows() - 1);
}

std::vector<int> generate_beam(const LMParams& params, const PlugSequence& prefix,
                               const BeamConfig& cfg) {
  if (cfg.beam_size < 1) throw std::invalid_argument("generate_beam: beam_size must be >= 1");
  if (cfg.max_new_tokens <= 0)
    throw std::invalid_argument("generate_beam: max_new_tokens must be > 0");

  struct Hyp {
    std::vector<int> ids;
    double logp = 0.0;
    bool done = false;
    int finish_step = -1;
  };
  auto final_score = [&](const Hyp& h) {
    std::size_t len = std::max<std::size_t>(1, h.ids.size());
    return h.logp / std::pow(static_cast<double>(len), cfg.length_penalty);
  };
  auto better = [&](const Hyp& a, const Hyp& b) {
    double sa = final_score(a), sb = final_score(b);
    if (sa != sb) return sa > sb;
    if (a.finish_step != b.finish_step) {
      // Unfinished hyps rank after any finished one with equal score.
      int fa = a.finish_step < 0 ? 1 << 30 : a.finish_step;
      int fb = b.finish_step < 0 ? 1 << 30 : b.finish_step;
      if (fa != fb) return fa < fb;
    }
    return a.ids < b.ids;
  };

  const Eigen::Index room = params.cfg.max_len - prefix.embeddings.rows();
  const int max_new = std::min<int>(cfg.max_new_tokens, static_cast<int>(std::max<Eigen::Index>(room, 0)));
  if (max_new <= 0) throw std::runtime_error("generate_beam: no room for new tokens");

  std::vector<Hyp> beams(1);
  std::vector<Hyp> finished;
  for (int step = 0; step < max_new; ++step) {
    std::vector<Hyp> candidates;
    for (const auto& h : beams) {
      if (h.done) continue;
      Matrix emb(prefix.embeddings.rows() + static_cast<Eigen::Index>(h.ids.size()),
                 params.cfg.d_lm);
      emb.topRows(prefix.embeddings.rows()) = prefix.embeddings;
      for (std::size_t i = 0; i < h.ids.size(); ++i)
        emb.row(prefix.embeddings.rows() + static_cast<Eigen::Index>(i)) =
            params.net.tok_emb.row(h.ids[i]);
      Vector lp = next_token_logprobs(params, emb);
      for (int v = 0; v < params.cfg.vocab_size; ++v) {
        Hyp c = h;
        c.ids.push_back(v);
        c.logp += lp(v);
        if (v == cfg.eos_id) {
          c.done = true;
          c.finish_step = step;
          finished.push_back(c);
        } else {
          candidates.push_back(std::move(c));
        }
      }
    }
    if (candidates.empty()) break;
    std::sort(candidates.begin(), candidates.end(), better);
    if (static_cast<int>(candidates.size()) > cfg.beam_size)
      candidates.resize(static_cast<std::size_t>(cfg.beam_size));
    beams = std::move(candidates);
  }
  for (auto& h : beams)
    if (!h.done) finished.push_back(h);
  std::sort(finished.begin(), finished.end(), better);
  std::vector<int> out = finished.front().ids;
  if (!out.empty() && out.back() == cfg.eos_id) out.pop_back();
  return out;
}

LabelScore score_labels(const LMParams& params, const PlugSequence& prefix,
                        const std::vector<std::vector<int>>& label_token_ids) {
  if (label_token_ids.empty()) throw std::invalid_argument("score_labels: empty label set");
  LabelScore result;
  result.logprobs.resize(static_cast<Eigen::Index>(label_token_ids.size()));
  for (std::size_t li = 0; li < label_token_ids.size(); ++li) {
    const auto& ids = label_token_ids[li];
    if (ids.empty()) throw std::invalid_argument("score_labels: empty label tokenization");
    Matrix emb(prefix.embeddings.rows() + static_cast<Eigen::Index>(ids.size()), params.cfg.d_lm);
    emb.topRows(prefix.embeddings.rows()) = prefix.embeddings;
    for (std::size_t i = 0; i < ids.size(); ++i)
      emb.row(prefix.embeddings.rows() + static_cast<Eigen::Index>(i)) =
          params.net.tok_emb.row(ids[i]);
    Matrix hidden = transformer_forward(params.net, emb, true);
    double total = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      Eigen::Index pos = prefix.embeddings.rows() + static_cast<Eigen::Index>(i) - 1;
      total += tied_logprobs(params.net, hidden, pos)(ids[i]);
    }
    result.logprobs(static_cast<Eigen::Index>(li)) = total;
  }
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < result.logprobs.size(); ++i)
    if (result.logprobs(i) > result.logprobs(best)) best = i;
  result.chosen = static_cast<int>(best);
  return result;
}

LMParams pretrain_lm(const std::vector<std::string>& corpus, const Tokenizer& tok,
                     const LMConfig& cfg, const LMPretrainConfig& pcfg, LMPretrainReport* report) {
  if (corpus.empty()) throw std::runtime_error("pretrain_lm: empty corpus");
  Rng rng(pcfg.seed ^ 0x11a0c0deULL);
  LMParams params = init_lm(cfg, rng);

  std::vector<std::vector<int>> seqs;
  for (const auto& line : corpus) {
    std::vector<int> ids;
    ids.push_back(Tokenizer::kBos);
    for (int id : tok.encode(line)) ids.push_back(id);
    ids.push_back(Tokenizer::kEos);
    if (static_cast<int>(ids.size()) > cfg.max_len) ids.resize(static_cast<std::size_t>(cfg.max_len));
    if (ids.size() >= 2) seqs.push_back(std::move(ids));
  }
  if (seqs.empty()) throw std::runtime_error("pretrain_lm: no usable sequences");
  std::size_t holdout =
      std::max<std::size_t>(1, static_cast<std::size_t>(pcfg.holdout_fraction *
                                                        static_cast<double>(seqs.size())));
  if (holdout >= seqs.size()) holdout = seqs.size() > 1 ? seqs.size() - 1 : 0;
  std::size_t train_n = seqs.size() - holdout;
  if (train_n == 0) throw std::runtime_error("pretrain_lm: corpus too small");

  AdamW opt;
  double last_loss = 0.0;
  for (long step = 0; step < pcfg.steps; ++step) {
    TransformerParams grads = zeros_like(params.net);
    double loss = 0.0;
    for (int b = 0; b < pcfg.batch_size; ++b) {
      const auto& seq = seqs[rng.below(train_n)];
      std::vector<PositionTarget> targets;
      for (std::size_t i = 0; i + 1 < seq.size(); ++i)
        targets.push_back({static_cast<Eigen::Index>(i), seq[i + 1]});
      ForwardCache fc;
      Matrix hidden = transformer_forward(params.net, embed_tokens(params.net, seq), true, &fc);
      Matrix dHidden = Matrix::Zero(hidden.rows(), hidden.cols());
      loss += tied_ce_loss(params.net, hidden, targets, &dHidden, &grads.tok_emb);
      Matrix d_in = transformer_backward(params.net, fc, dHidden, &grads);
      for (std::size_t i = 0; i < seq.size(); ++i)
        grads.tok_emb.row(seq[i]) += d_in.row(static_cast<Eigen::Index>(i));
    }
    loss /= pcfg.batch_size;
    if (!std::isfinite(loss))
      throw std::runtime_error("pretrain_lm: divergence at step " + std::to_string(step));
    for (auto& v : param_views(grads))
      for (std::size_t i = 0; i < v.size; ++i) v.data[i] /= pcfg.batch_size;
    auto gv = param_views(grads);
    clip_global_norm(gv, 1.0);
    opt.step(param_views(params.net), gv, lr_at(step, pcfg.steps, pcfg.lr, 0.05));
    last_loss = loss;
  }

  double ce_sum = 0.0;
  long ce_count = 0;
  for (std::size_t si = train_n; si < seqs.size(); ++si) {
    const auto& seq = seqs[si];
    Matrix hidden = transformer_forward(params.net, embed_tokens(params.net, seq), true);
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      ce_sum -= tied_logprobs(params.net, hidden, static_cast<Eigen::Index>(i))(seq[i + 1]);
      ++ce_count;
    }
  }
  if (report) {
    report->final_loss = last_loss;
    report->holdout_perplexity = ce_count > 0 ? std::exp(ce_sum / ce_count) : 0.0;
  }
  round_params_f32(params.net);
  return params;
}

}  // namespace pplug
