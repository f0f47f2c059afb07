#include "reclab/model.hpp"

#include <algorithm>
#include <cmath>

#include "reclab/errors.hpp"
#include "reclab/gradcheck.hpp"
#include "reclab/rng.hpp"

namespace reclab {

namespace {

constexpr Real kInitStd = Real(0.02);
constexpr std::size_t kEvalChunk = 128;

std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

enum class InitRule { normal, zeros, ones };

InitRule init_rule(const std::string& name) {
  if (ends_with(name, "gain")) return InitRule::ones;
  if (ends_with(name, ".up")) return InitRule::zeros;
  static const char* kWeights[] = {"embed.tokens", "embed.positions", ".wq", ".wk", ".wv", ".wo", ".w1", ".w2", ".down"};
  for (const char* w : kWeights) {
    if (ends_with(name, w)) return InitRule::normal;
  }
  return InitRule::zeros;
}

ParamVector init_segments(const Schema& schema, std::uint64_t seed, std::uint64_t role) {
  ParamVector out;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto& [name, shape] = schema[i];
    Tensor t(shape);
    switch (init_rule(name)) {
      case InitRule::ones:
        for (auto& v : t.values()) v = 1;
        break;
      case InitRule::normal: {
        Rng rng = Rng::derive(seed, role, i);
        for (auto& v : t.values()) v = Real(rng.truncated_normal(kInitStd));
        break;
      }
      case InitRule::zeros:
        break;
    }
    out.add(name, std::move(t));
  }
  return out;
}

void add_adapter_schema(Schema& s, const std::string& prefix, std::size_t d, std::size_t r) {
  s.emplace_back(prefix + "ln.gain", Shape{d});
  s.emplace_back(prefix + "ln.bias", Shape{d});
  s.emplace_back(prefix + "down", Shape{d, r});
  s.emplace_back(prefix + "down_bias", Shape{r});
  s.emplace_back(prefix + "up", Shape{r, d});
  s.emplace_back(prefix + "up_bias", Shape{d});
}

void check_schema_against(const ParamVector& p, const Schema& expected, const char* what) {
  for (std::size_t i = 0; i < std::max(p.segment_count(), expected.size()); ++i) {
    if (i >= p.segment_count()) throw CompositionError(std::string(what) + " is missing segment '" + expected[i].first + "'");
    if (i >= expected.size()) throw CompositionError(std::string(what) + " has unexpected segment '" + p.name(i) + "'");
    if (p.name(i) != expected[i].first) {
      throw CompositionError(std::string(what) + " segment '" + p.name(i) + "' found where '" + expected[i].first + "' expected");
    }
    if (p.tensor(i).shape() != expected[i].second) {
      throw CompositionError(std::string(what) + " segment '" + p.name(i) + "' has shape " +
                             shape_string(p.tensor(i).shape()) + ", expected " + shape_string(expected[i].second));
    }
  }
}

Var adapter_block(Graph& g, const Bindings& p, const std::string& prefix, Var s) {
  Var t = g.layer_norm(s, p.at(prefix + "ln.gain"), p.at(prefix + "ln.bias"));
  t = g.gelu(g.add_row(g.matmul(t, p.at(prefix + "down")), p.at(prefix + "down_bias")));
  t = g.add_row(g.matmul(t, p.at(prefix + "up")), p.at(prefix + "up_bias"));
  return g.add(s, t);
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 || max_seq_len == 0 ||
      adapter_bottleneck == 0) {
    fail("all sizes must be positive");
  }
  if (d_model % n_heads != 0) fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  if (adapter_bottleneck >= d_model) fail("adapter_bottleneck must be smaller than d_model");
  if (!(dropout_rate >= 0 && dropout_rate < 1)) fail("dropout_rate must be in [0, 1)");
  if (vocab_size <= static_cast<std::size_t>(kSepToken)) fail("vocab_size must exceed the reserved tokens");
}

Schema backbone_schema(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  Schema s;
  s.emplace_back("embed.tokens", Shape{cfg.vocab_size, d});
  s.emplace_back("embed.positions", Shape{cfg.max_seq_len, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    s.emplace_back(p + "ln1.gain", Shape{d});
    s.emplace_back(p + "ln1.bias", Shape{d});
    for (const char* w : {"q", "k", "v", "o"}) {
      s.emplace_back(p + "attn.w" + w, Shape{d, d});
      s.emplace_back(p + "attn.b" + w, Shape{d});
    }
    s.emplace_back(p + "ln2.gain", Shape{d});
    s.emplace_back(p + "ln2.bias", Shape{d});
    s.emplace_back(p + "ffn.w1", Shape{d, cfg.d_ff});
    s.emplace_back(p + "ffn.b1", Shape{cfg.d_ff});
    s.emplace_back(p + "ffn.w2", Shape{cfg.d_ff, d});
    s.emplace_back(p + "ffn.b2", Shape{d});
  }
  s.emplace_back("final_ln.gain", Shape{d});
  s.emplace_back("final_ln.bias", Shape{d});
  s.emplace_back("head.bias", Shape{cfg.vocab_size});
  return s;
}

Schema adapter_schema(const ModelConfig& cfg) {
  Schema s;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    add_adapter_schema(s, layer_prefix(l) + "adapter_attn.", cfg.d_model, cfg.adapter_bottleneck);
    add_adapter_schema(s, layer_prefix(l) + "adapter_ffn.", cfg.d_model, cfg.adapter_bottleneck);
  }
  return s;
}

const char* delta_kind_name(DeltaKind kind) { return kind == DeltaKind::full ? "full" : "adapter"; }

ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return init_segments(backbone_schema(cfg), seed, 1);
}

AdaptedWeights init_adapter(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  AdaptedWeights w;
  w.kind = DeltaKind::adapter;
  w.segments = init_segments(adapter_schema(cfg), seed, 2);
  return w;
}

AdaptedWeights zero_delta(const ModelConfig& cfg, DeltaKind kind) {
  if (kind == DeltaKind::adapter) return init_adapter(cfg, 0);
  AdaptedWeights w;
  w.kind = DeltaKind::full;
  w.segments = ParamVector(backbone_schema(cfg));
  return w;
}

void check_delta_schema(const ModelConfig& cfg, const AdaptedWeights& delta) {
  const Schema expected = delta.kind == DeltaKind::full ? backbone_schema(cfg) : adapter_schema(cfg);
  check_schema_against(delta.segments, expected, delta.kind == DeltaKind::full ? "full delta" : "adapter delta");
}

EffectiveModel base_model(const ModelConfig& cfg, const ParamVector& theta0) {
  check_schema_against(theta0, backbone_schema(cfg), "backbone");
  return EffectiveModel{cfg, theta0, false};
}

EffectiveModel compose(const ModelConfig& cfg, const ParamVector& theta0, const AdaptedWeights& delta) {
  check_schema_against(theta0, backbone_schema(cfg), "backbone");
  check_delta_schema(cfg, delta);
  if (delta.kind == DeltaKind::full) return EffectiveModel{cfg, theta0 + delta.segments, false};
  EffectiveModel m{cfg, theta0, true};
  for (const auto& [name, t] : delta.segments.segments()) m.params.add(name, t);
  return m;
}

Var Bindings::at(const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw SchemaError("no bound segment named '" + name + "'");
  return it->second;
}

void bind(Graph& g, const ParamVector& params, bool trainable, Bindings& into) {
  for (const auto& [name, t] : params.segments()) into.set(name, g.leaf(t, trainable));
}

Bindings bind(Graph& g, const ParamVector& params, bool trainable) {
  Bindings b;
  bind(g, params, trainable, b);
  return b;
}

GraphForward forward_graph(Graph& g, const ModelConfig& cfg, const Bindings& p, const TokenBatch& batch,
                           const ForwardOptions& opts) {
  const std::size_t rows = batch.n_seq * batch.seq_len;
  if (rows == 0 || batch.tokens.size() != rows) {
    throw InputError("forward: " + std::to_string(batch.tokens.size()) + " tokens for " + std::to_string(batch.n_seq) +
                     " sequences of length " + std::to_string(batch.seq_len));
  }
  if (batch.seq_len > cfg.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  for (std::int32_t t : batch.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) throw InputError("forward: token " + std::to_string(t) + " outside vocabulary");
  }
  for (std::size_t r : batch.mask_rows) {
    if (r >= rows) throw InputError("forward: mask row " + std::to_string(r) + " outside batch of " + std::to_string(rows) + " rows");
  }

  const bool dropout = opts.training && cfg.dropout_rate > 0;
  std::uint64_t site = 0;
  auto drop = [&](Var x) {
    if (!dropout) return x;
    return g.dropout(x, cfg.dropout_rate, Rng::derive(opts.dropout_seed, ++site).next_u64());
  };

  std::vector<std::int32_t> positions(rows);
  for (std::size_t r = 0; r < rows; ++r) positions[r] = static_cast<std::int32_t>(r % batch.seq_len);
  Var x = g.add(g.embedding(p.at("embed.tokens"), batch.tokens), g.embedding(p.at("embed.positions"), positions));
  x = drop(x);

  const bool adapters = p.contains(layer_prefix(0) + "adapter_attn.down");
  GraphForward out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix(l);
    const Var a = g.layer_norm(x, p.at(pre + "ln1.gain"), p.at(pre + "ln1.bias"));
    const Var q = g.add_row(g.matmul(a, p.at(pre + "attn.wq")), p.at(pre + "attn.bq"));
    const Var k = g.add_row(g.matmul(a, p.at(pre + "attn.wk")), p.at(pre + "attn.bk"));
    const Var v = g.add_row(g.matmul(a, p.at(pre + "attn.wv")), p.at(pre + "attn.bv"));
    const Var att = g.attention(q, k, v, batch.n_seq, batch.seq_len, cfg.n_heads);
    out.attention.push_back(att);
    Var o = drop(g.add_row(g.matmul(att, p.at(pre + "attn.wo")), p.at(pre + "attn.bo")));
    if (adapters) o = adapter_block(g, p, pre + "adapter_attn.", o);
    x = g.add(x, o);

    Var f = g.layer_norm(x, p.at(pre + "ln2.gain"), p.at(pre + "ln2.bias"));
    f = g.gelu(g.add_row(g.matmul(f, p.at(pre + "ffn.w1")), p.at(pre + "ffn.b1")));
    f = drop(g.add_row(g.matmul(f, p.at(pre + "ffn.w2")), p.at(pre + "ffn.b2")));
    if (adapters) f = adapter_block(g, p, pre + "adapter_ffn.", f);
    x = g.add(x, f);
    out.hidden.push_back(x);
  }
  if (!batch.mask_rows.empty()) {
    // Row-wise layernorm commutes with row selection.
    out.masked = g.layer_norm(g.gather_rows(x, batch.mask_rows), p.at("final_ln.gain"), p.at("final_ln.bias"));
  }
  return out;
}

Var mlm_logits(Graph& g, const Bindings& p, Var masked) {
  return g.add_row(g.matmul_nt(masked, p.at("embed.tokens")), p.at("head.bias"));
}

Var class_logits(Graph& g, const Bindings& p, Var masked, const std::vector<std::int32_t>& verbalizer) {
  if (verbalizer.empty()) throw InputError("class_logits: empty verbalizer");
  const Var table = p.at("embed.tokens");
  const std::size_t vocab = g.value(table).dim(0);
  std::vector<std::size_t> rows;
  for (std::int32_t t : verbalizer) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw InputError("class_logits: verbalizer token " + std::to_string(t) + " outside vocabulary");
    rows.push_back(static_cast<std::size_t>(t));
  }
  const Var w = g.gather_rows(table, rows);
  const Var bias = g.reshape(g.gather_rows(g.reshape(p.at("head.bias"), {vocab, 1}), rows), {rows.size()});
  return g.add_row(g.matmul_nt(masked, w), bias);
}

MlmOutput forward_mlm(const EffectiveModel& model, const TokenBatch& batch, const ForwardOptions& opts) {
  Graph g;
  const Bindings p = bind(g, model.params, false);
  const GraphForward fw = forward_graph(g, model.config, p, batch, opts);
  MlmOutput out;
  if (fw.masked.valid()) out.logits = g.value(mlm_logits(g, p, fw.masked));
  for (std::size_t l = 0; l < fw.hidden.size(); ++l) {
    out.hidden.push_back(g.value(fw.hidden[l]));
    out.hidden_normalized.push_back(g.value(g.row_normalize(fw.hidden[l])));
    out.attention.push_back(g.attention_probs(fw.attention[l]));
  }
  return out;
}

Tensor attention_map(const MlmOutput& out, std::size_t seq, std::size_t layer, std::size_t head) {
  if (layer >= out.attention.size()) throw InputError("attention_map: layer " + std::to_string(layer) + " out of range");
  const Tensor& a = out.attention[layer];
  if (seq >= a.dim(0) || head >= a.dim(1)) throw InputError("attention_map: sequence or head out of range");
  const std::size_t s = a.dim(2);
  const std::size_t offset = (seq * a.dim(1) + head) * s * s;
  return Tensor(Shape{s, s}, std::vector<Real>(a.values().begin() + static_cast<std::ptrdiff_t>(offset),
                                              a.values().begin() + static_cast<std::ptrdiff_t>(offset + s * s)));
}

std::size_t mask_position(const Example& ex) {
  std::size_t found = ex.tokens.size();
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
    if (ex.tokens[i] != kMaskToken) continue;
    if (found != ex.tokens.size()) throw InputError("example has more than one mask slot");
    found = i;
  }
  if (found == ex.tokens.size()) throw InputError("example has no mask slot");
  return found;
}

TokenBatch make_batch(std::span<const Example* const> examples) {
  if (examples.empty()) throw InputError("make_batch: no examples");
  TokenBatch b;
  b.n_seq = examples.size();
  b.seq_len = examples.front()->tokens.size();
  b.tokens.reserve(b.n_seq * b.seq_len);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const Example& ex = *examples[i];
    if (ex.tokens.size() != b.seq_len) throw InputError("make_batch: examples differ in length");
    b.mask_rows.push_back(i * b.seq_len + mask_position(ex));
    b.tokens.insert(b.tokens.end(), ex.tokens.begin(), ex.tokens.end());
  }
  return b;
}

std::int32_t argmax_label(std::span<const Real> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return static_cast<std::int32_t>(best);
}

std::vector<Prediction> classify_batch(const EffectiveModel& model, std::span<const Example> examples,
                                       const std::vector<std::int32_t>& verbalizer) {
  for (std::size_t i = 0; i < verbalizer.size(); ++i) {
    for (std::size_t j = i + 1; j < verbalizer.size(); ++j) {
      if (verbalizer[i] == verbalizer[j]) throw InputError("classify: verbalizer tokens must be distinct");
    }
  }
  std::vector<Prediction> out(examples.size());
  // Group by length so each chunk stacks into one batch.
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < examples.size(); ++i) by_len[examples[i].tokens.size()].push_back(i);
  for (const auto& [len, idx] : by_len) {
    for (std::size_t start = 0; start < idx.size(); start += kEvalChunk) {
      const std::size_t end = std::min(idx.size(), start + kEvalChunk);
      std::vector<const Example*> chunk;
      for (std::size_t i = start; i < end; ++i) chunk.push_back(&examples[idx[i]]);
      const TokenBatch batch = make_batch(chunk);
      Graph g;
      const Bindings p = bind(g, model.params, false);
      const GraphForward fw = forward_graph(g, model.config, p, batch);
      const Var logits = class_logits(g, p, fw.masked, verbalizer);
      const Var softmax = g.softmax(logits);
      const Tensor& lv = g.value(logits);
      const Tensor& probs = g.value(softmax);
      const std::size_t c = verbalizer.size();
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        Prediction& pr = out[idx[start + i]];
        pr.label = argmax_label(lv.values().subspan(i * c, c));
        pr.distribution.assign(probs.values().begin() + static_cast<std::ptrdiff_t>(i * c),
                               probs.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
      }
    }
  }
  return out;
}

Prediction classify(const EffectiveModel& model, const Example& ex, const std::vector<std::int32_t>& verbalizer) {
  return classify_batch(model, std::span<const Example>(&ex, 1), verbalizer).front();
}

Real finite_diff_check(const std::function<Var(Graph&, const Bindings&)>& f, const ParamVector& theta, Real h) {
  std::vector<Tensor> params;
  std::vector<std::string> names;
  for (const auto& [name, t] : theta.segments()) {
    names.push_back(name);
    params.push_back(t);
  }
  auto builder = [&](Graph& g, std::span<const Var> vars) {
    Bindings b;
    for (std::size_t i = 0; i < vars.size(); ++i) b.set(names[i], vars[i]);
    return f(g, b);
  };
  return finite_diff_check(builder, std::move(params), h);
}

}  // namespace reclab
