#include "moemeta/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "moemeta/adam.hpp"
#include "moemeta/error.hpp"

namespace moemeta {

using nlohmann::json;

// ---- config ----------------------------------------------------------------

void validate(const ModelConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "model config: " + what);
  };
  require(c.embed_dim >= 1, "embed_dim must be at least 1");
  require(c.num_experts >= 1, "num_experts must be at least 1");
  require(c.top_n >= 1 && c.top_n <= c.num_experts, "top_n must satisfy 1 <= top_n <= num_experts");
  require(c.expert_hidden >= 1 && c.gate_hidden >= 1, "hidden widths must be at least 1");
  require(c.neighbor_cap >= 1, "neighbor_cap must be at least 1");
  require(c.margin > 0.0, "margin must be positive");
  require(c.inner_steps >= 1 && c.test_inner_steps >= 1, "inner steps must be at least 1");
  require(c.inner_lr >= 0.0, "inner_lr must be non-negative");
  require(c.eta_init_std >= 0.0, "eta_init_std must be non-negative");
  require(c.negatives_per_positive >= 1, "negatives_per_positive must be at least 1");
}

json to_json(const ModelConfig& c) {
  return json{{"embed_dim", c.embed_dim},
              {"num_experts", c.num_experts},
              {"top_n", c.top_n},
              {"expert_hidden", c.expert_hidden},
              {"gate_hidden", c.gate_hidden},
              {"neighbor_cap", c.neighbor_cap},
              {"margin", c.margin},
              {"inner_lr", c.inner_lr},
              {"inner_steps", c.inner_steps},
              {"test_inner_steps", c.test_inner_steps},
              {"eta_init", c.eta_init == EtaInit::kZero ? "zero" : "gaussian"},
              {"eta_init_std", c.eta_init_std},
              {"use_neighbor_agg", c.use_neighbor_agg},
              {"use_moe", c.use_moe},
              {"use_local_adapt", c.use_local_adapt},
              {"freeze_embeddings", c.freeze_embeddings},
              {"meta_gradient", c.meta_gradient == MetaGradient::kFirstOrder ? "first_order" : "exact"},
              {"negatives_per_positive", c.negatives_per_positive}};
}

void apply_model_json(const json& doc, ModelConfig& c) {
  try {
    auto get = [&](const char* key, auto& field) {
      if (doc.contains(key)) field = doc.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("embed_dim", c.embed_dim);
    get("num_experts", c.num_experts);
    get("top_n", c.top_n);
    get("expert_hidden", c.expert_hidden);
    get("gate_hidden", c.gate_hidden);
    get("neighbor_cap", c.neighbor_cap);
    get("margin", c.margin);
    get("inner_lr", c.inner_lr);
    get("inner_steps", c.inner_steps);
    get("test_inner_steps", c.test_inner_steps);
    get("eta_init_std", c.eta_init_std);
    get("use_neighbor_agg", c.use_neighbor_agg);
    get("use_moe", c.use_moe);
    get("use_local_adapt", c.use_local_adapt);
    get("freeze_embeddings", c.freeze_embeddings);
    get("negatives_per_positive", c.negatives_per_positive);
    if (doc.contains("eta_init")) {
      const auto v = doc.at("eta_init").get<std::string>();
      if (v == "zero") {
        c.eta_init = EtaInit::kZero;
      } else if (v == "gaussian") {
        c.eta_init = EtaInit::kGaussian;
      } else {
        fail(ErrorKind::kConfig, "eta_init must be \"zero\" or \"gaussian\", got \"" + v + "\"");
      }
    }
    if (doc.contains("meta_gradient")) {
      const auto v = doc.at("meta_gradient").get<std::string>();
      if (v == "first_order") {
        c.meta_gradient = MetaGradient::kFirstOrder;
      } else if (v == "exact") {
        c.meta_gradient = MetaGradient::kExact;
      } else {
        fail(ErrorKind::kConfig, "meta_gradient must be \"first_order\" or \"exact\", got \"" + v + "\"");
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("bad model config value: ") + e.what());
  }
}

// ---- eta, projection, scoring -------------------------------------------------

Eta Eta::zeros(std::size_t dim) {
  return Eta{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
}

Eta Eta::gaussian(std::size_t dim, double stddev, Rng& rng) {
  Eta eta = zeros(dim);
  for (auto* v : {&eta.head, &eta.relation, &eta.tail}) {
    for (double& x : *v) x = rng.normal(0.0, stddev);
  }
  return eta;
}

Projected project(const Eta& eta, std::span<const double> head, std::span<const double> relation,
                  std::span<const double> tail) {
  const std::size_t d = relation.size();
  const double ah = dot(eta.head, relation);
  const double ar = dot(eta.relation, relation);
  const double at = dot(eta.tail, relation);
  Projected p{std::vector<double>(d), std::vector<double>(d), std::vector<double>(d)};
  for (std::size_t i = 0; i < d; ++i) {
    p.head[i] = head[i] + ah * relation[i];
    p.relation[i] = relation[i] + ar * relation[i];
    p.tail[i] = tail[i] + at * relation[i];
  }
  return p;
}

double score(std::span<const double> head, std::span<const double> relation, std::span<const double> tail) {
  double acc = 0.0;
  for (std::size_t i = 0; i < head.size(); ++i) {
    const double v = head[i] + relation[i] - tail[i];
    acc += v * v;
  }
  return std::sqrt(acc);
}

double margin_loss(std::span<const double> positive, std::span<const double> negative, double margin) {
  if (positive.size() != negative.size()) {
    fail(ErrorKind::kDimension, "margin loss: " + std::to_string(positive.size()) + " positive vs " +
                                    std::to_string(negative.size()) + " negative scores");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < positive.size(); ++i) total += std::max(0.0, positive[i] + margin - negative[i]);
  return total;
}

namespace {

// Score of one (h, t) pair at (eta, R) with everything the derivatives need.
// With eta == nullptr this is the plain translation score and c == 1.
struct ScoreEval {
  std::vector<double> v;  // h' + R' - t'
  std::vector<double> u;  // v / ||v||, zero at the kink
  double s = 0.0;
  double c = 1.0;         // 1 + (p_h + p_r - p_t) . R
  double u_dot_r = 0.0;
};

ScoreEval eval_score(std::span<const double> h, std::span<const double> t, std::span<const double> r,
                     const Eta* eta) {
  const std::size_t d = r.size();
  ScoreEval e;
  e.v.resize(d);
  e.u.assign(d, 0.0);
  if (eta) {
    const double ah = dot(eta->head, r);
    const double ar = dot(eta->relation, r);
    const double at = dot(eta->tail, r);
    for (std::size_t i = 0; i < d; ++i) {
      const double hp = h[i] + ah * r[i];
      const double rp = r[i] + ar * r[i];
      const double tp = t[i] + at * r[i];
      e.v[i] = hp + rp - tp;
    }
    e.c = 1.0 + ah + ar - at;
  } else {
    for (std::size_t i = 0; i < d; ++i) e.v[i] = h[i] + r[i] - t[i];
  }
  e.s = l2_norm(e.v);
  if (e.s > 0.0) {
    for (std::size_t i = 0; i < d; ++i) e.u[i] = e.v[i] / e.s;
  }
  e.u_dot_r = dot(e.u, r);
  return e;
}

// Accumulates w * ds/d(h, t, R, eta).
void score_grad(const ScoreEval& e, std::span<const double> r, const Eta* eta, double w, std::span<double> dh,
                std::span<double> dt, std::span<double> dr, Eta* deta) {
  const std::size_t d = r.size();
  if (!dh.empty()) axpy(w, e.u, dh);
  if (!dt.empty()) axpy(-w, e.u, dt);
  for (std::size_t i = 0; i < d; ++i) {
    double g = e.c * e.u[i];
    if (eta) g += e.u_dot_r * (eta->head[i] + eta->relation[i] - eta->tail[i]);
    dr[i] += w * g;
  }
  if (eta && deta) {
    const double k = w * e.u_dot_r;
    axpy(k, r, deta->head);
    axpy(k, r, deta->relation);
    axpy(-k, r, deta->tail);
  }
}

// Directional derivative, along (dir_eta, dir_r), of w * ds/d(h, t, R, eta).
// h and t carry no tangent. Accumulates into the outputs.
void score_hvp(const ScoreEval& e, std::span<const double> r, const Eta& eta, double w, const Eta& dir_eta,
               std::span<const double> dir_r, std::span<double> dh, std::span<double> dt, std::span<double> dr,
               Eta& deta) {
  const std::size_t d = r.size();
  if (e.s == 0.0) return;
  std::vector<double> psum(d);
  std::vector<double> dpsum(d);
  for (std::size_t i = 0; i < d; ++i) {
    psum[i] = eta.head[i] + eta.relation[i] - eta.tail[i];
    dpsum[i] = dir_eta.head[i] + dir_eta.relation[i] - dir_eta.tail[i];
  }
  const double dc = dot(dpsum, r) + dot(psum, dir_r);
  std::vector<double> dv(d);
  for (std::size_t i = 0; i < d; ++i) dv[i] = dc * r[i] + e.c * dir_r[i];
  const double u_dv = dot(e.u, dv);
  std::vector<double> du(d);
  for (std::size_t i = 0; i < d; ++i) du[i] = (dv[i] - e.u[i] * u_dv) / e.s;
  const double d_u_dot_r = dot(du, r) + dot(e.u, dir_r);

  if (!dh.empty()) axpy(w, du, dh);
  if (!dt.empty()) axpy(-w, du, dt);
  for (std::size_t i = 0; i < d; ++i) {
    dr[i] += w * (dc * e.u[i] + e.c * du[i] + d_u_dot_r * psum[i] + e.u_dot_r * dpsum[i]);
  }
  for (std::size_t i = 0; i < d; ++i) {
    const double g = w * (d_u_dot_r * r[i] + e.u_dot_r * dir_r[i]);
    deta.head[i] += g;
    deta.relation[i] += g;
    deta.tail[i] -= g;
  }
}

struct TermEval {
  ScoreEval pos;
  ScoreEval neg;
  double loss = 0.0;
  bool active = false;
};

double hinge_forward(const EncodingTable& enc, std::span<const HingeTerm> terms, const Eta* eta,
                     std::span<const double> r, double margin, std::vector<TermEval>* evals) {
  double total = 0.0;
  if (evals) evals->clear();
  for (const auto& term : terms) {
    TermEval te;
    te.pos = eval_score(enc[term.head], enc[term.tail], r, eta);
    te.neg = eval_score(enc[term.head], enc[term.negative], r, eta);
    const double gap = te.pos.s + margin - te.neg.s;
    te.active = gap > 0.0;
    te.loss = te.active ? gap : 0.0;
    total += te.loss;
    if (evals) evals->push_back(std::move(te));
  }
  return total;
}

using GradTable = std::vector<std::vector<double>>;

std::span<double> slot(GradTable* table, std::size_t i) {
  return table ? std::span<double>((*table)[i]) : std::span<double>{};
}

// Gradient of the hinge sum with respect to R, eta, and (optionally) the encodings.
void hinge_backward(const std::vector<TermEval>& evals, std::span<const HingeTerm> terms, const Eta* eta,
                    std::span<const double> r, std::span<double> dr, Eta* deta, GradTable* denc) {
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (!evals[k].active) continue;
    const auto& term = terms[k];
    score_grad(evals[k].pos, r, eta, 1.0, slot(denc, term.head), slot(denc, term.tail), dr, deta);
    score_grad(evals[k].neg, r, eta, -1.0, slot(denc, term.head), slot(denc, term.negative), dr, deta);
  }
}

void hinge_hvp(const std::vector<TermEval>& evals, std::span<const HingeTerm> terms, const Eta& eta,
               std::span<const double> r, const Eta& dir_eta, std::span<const double> dir_r, std::span<double> dr,
               Eta& deta, GradTable& denc) {
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (!evals[k].active) continue;
    const auto& term = terms[k];
    score_hvp(evals[k].pos, r, eta, 1.0, dir_eta, dir_r, denc[term.head], denc[term.tail], dr, deta);
    score_hvp(evals[k].neg, r, eta, -1.0, dir_eta, dir_r, denc[term.head], denc[term.negative], dr, deta);
  }
}

void eta_step(Eta& eta, const Eta& grad, double lr) {
  gradient_step(eta.head, grad.head, lr);
  gradient_step(eta.relation, grad.relation, lr);
  gradient_step(eta.tail, grad.tail, lr);
}

void eta_axpy(double alpha, const Eta& x, Eta& y) {
  axpy(alpha, x.head, y.head);
  axpy(alpha, x.relation, y.relation);
  axpy(alpha, x.tail, y.tail);
}

bool eta_finite(const Eta& eta) {
  return all_finite(eta.head) && all_finite(eta.relation) && all_finite(eta.tail);
}

void fill_uniform(Tensor& t, double bound, Rng& rng) {
  for (double& x : t.data()) x = rng.uniform(-bound, bound);
}

void fill_xavier(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  fill_uniform(t, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

MlpIndex add_mlp(ParamSet& params, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
                 Rng& rng) {
  Tensor w1(hidden, in);
  fill_xavier(w1, in, hidden, rng);
  Tensor w2(out, hidden);
  fill_xavier(w2, hidden, out, rng);
  MlpIndex idx;
  idx.w1 = params.add(prefix + ".W1", std::move(w1));
  idx.b1 = params.add(prefix + ".b1", Tensor(hidden));
  idx.w2 = params.add(prefix + ".W2", std::move(w2));
  idx.b2 = params.add(prefix + ".b2", Tensor(out));
  return idx;
}

std::string expert_prefix(std::size_t i) { return "expert." + std::to_string(i); }

}  // namespace

double hinge_loss(const EncodingTable& encodings, std::span<const HingeTerm> terms, const Eta* eta,
                  std::span<const double> relation, double margin) {
  return hinge_forward(encodings, terms, eta, relation, margin, nullptr);
}

TaskExample attach_negatives(const KnowledgeGraph& graph, const Task& task, std::size_t negatives_per_positive,
                             Rng& rng) {
  TaskExample ex;
  ex.relation = task.relation;
  ex.support = task.support;
  ex.query = task.query;
  for (const auto& p : task.support) {
    for (std::size_t k = 0; k < negatives_per_positive; ++k) {
      ex.support_negatives.push_back(sample_negative(graph, p.head, task.relation, rng));
    }
  }
  for (const auto& p : task.query) {
    for (std::size_t k = 0; k < negatives_per_positive; ++k) {
      ex.query_negatives.push_back(sample_negative(graph, p.head, task.relation, rng));
    }
  }
  return ex;
}

// ---- parameters ------------------------------------------------------------------

ParamSet create_params(const ModelConfig& config, const KnowledgeGraph& graph, Rng& rng) {
  validate(config);
  const std::size_t d = config.embed_dim;
  const bool trainable_embeddings = !config.freeze_embeddings;
  ParamSet params;

  Tensor entities(graph.num_entities(), d);
  fill_uniform(entities, std::sqrt(6.0 / static_cast<double>(d)), rng);
  if (const auto& pretrained = graph.pretrained_embeddings()) {
    if (pretrained->cols() != d) {
      fail(ErrorKind::kConfig, "pretrained entity embeddings have dimension " + std::to_string(pretrained->cols()) +
                                   " but embed_dim is " + std::to_string(d));
    }
    for (std::size_t e = 0; e < graph.num_entities(); ++e) {
      if (graph.pretrained_mask()[e]) std::copy_n(pretrained->row(e).begin(), d, entities.row(e).begin());
    }
  }
  params.add("entity_embeddings", std::move(entities), trainable_embeddings);

  Tensor relations(graph.num_relation_slots(), d);
  fill_uniform(relations, std::sqrt(6.0 / static_cast<double>(d)), rng);
  params.add("relation_embeddings", std::move(relations), trainable_embeddings);

  Tensor w(d, 2 * d);
  fill_xavier(w, 2 * d, d, rng);
  params.add("neighbor.W", std::move(w));
  Tensor beta(d);
  fill_xavier(beta, d, 1, rng);
  params.add("neighbor.beta", std::move(beta));

  for (std::size_t i = 0; i < config.num_experts; ++i) {
    add_mlp(params, expert_prefix(i), 2 * d, config.expert_hidden, d, rng);
  }
  add_mlp(params, "gate", 2 * d, config.gate_hidden, config.num_experts, rng);
  add_mlp(params, "relation_mlp", 2 * d, config.expert_hidden, d, rng);
  return params;
}

MoEMeta::MoEMeta(const ModelConfig& config, const ParamSet& params) : config_(config), params_(&params) {
  validate(config_);
  const std::size_t d = config_.embed_dim;
  auto resolve = [&](const std::string& name, std::vector<std::size_t> shape) {
    if (!params.contains(name)) fail(ErrorKind::kLoad, "parameters lack group '" + name + "'");
    const std::size_t gi = params.index_of(name);
    const auto& actual = params[gi].value.shape();
    // Embedding tables only fix the column count here; row counts come from the graph.
    const bool table = name == "entity_embeddings" || name == "relation_embeddings";
    const bool ok = table ? (actual.size() == 2 && actual[1] == shape[1]) : actual == shape;
    if (!ok) {
      fail(ErrorKind::kLoad, "parameter group '" + name + "' has shape " + params[gi].value.shape_string() +
                                 ", which does not match the model configuration");
    }
    return gi;
  };
  auto resolve_mlp = [&](const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out) {
    MlpIndex idx;
    idx.w1 = resolve(prefix + ".W1", {hidden, in});
    idx.b1 = resolve(prefix + ".b1", {hidden});
    idx.w2 = resolve(prefix + ".W2", {out, hidden});
    idx.b2 = resolve(prefix + ".b2", {out});
    return idx;
  };
  entity_ = resolve("entity_embeddings", {0, d});
  relation_ = resolve("relation_embeddings", {0, d});
  neighbor_w_ = resolve("neighbor.W", {d, 2 * d});
  neighbor_beta_ = resolve("neighbor.beta", {d});
  for (std::size_t i = 0; i < config_.num_experts; ++i) {
    experts_.push_back(resolve_mlp(expert_prefix(i), 2 * d, config_.expert_hidden, d));
  }
  if (params.contains(expert_prefix(config_.num_experts) + ".W1")) {
    fail(ErrorKind::kLoad, "parameters hold more experts than num_experts = " + std::to_string(config_.num_experts));
  }
  gate_ = resolve_mlp("gate", 2 * d, config_.gate_hidden, config_.num_experts);
  relation_mlp_ = resolve_mlp("relation_mlp", 2 * d, config_.expert_hidden, d);
}

MlpWeights MoEMeta::mlp(const MlpIndex& idx) const {
  const ParamSet& p = *params_;
  return MlpWeights{p[idx.w1].value, p[idx.b1].value, p[idx.w2].value, p[idx.b2].value};
}

MlpGrads MoEMeta::mlp_grads(const MlpIndex& idx, GradBuffer& grads) const {
  return MlpGrads{grads.dense(idx.w1), grads.dense(idx.b1), grads.dense(idx.w2), grads.dense(idx.b2)};
}

// ---- neighbor encoder ---------------------------------------------------------

EntityEncoding MoEMeta::encode_entity(EntityId entity, std::span<const Neighbor> neighbors) const {
  const std::size_t d = config_.embed_dim;
  const ParamSet& p = *params_;
  EntityEncoding enc;
  enc.entity = entity;
  const auto own = p[entity_].value.row(entity);
  enc.value.assign(own.begin(), own.end());
  if (!config_.use_neighbor_agg || neighbors.empty()) return enc;

  enc.neighbors = neighbors;
  const std::size_t n = neighbors.size();
  const Tensor& w = p[neighbor_w_].value;
  const auto beta = p[neighbor_beta_].value.data();
  enc.pre.resize(n * d);
  enc.act.resize(n * d);
  enc.gate.resize(n);
  std::vector<double> tuple(2 * d);
  std::vector<double> aggregate(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto rel = p[relation_].value.row(neighbors[i].relation);
    const auto ent = p[entity_].value.row(neighbors[i].entity);
    std::copy(rel.begin(), rel.end(), tuple.begin());
    std::copy(ent.begin(), ent.end(), tuple.begin() + static_cast<std::ptrdiff_t>(d));
    std::span<double> pre(enc.pre.data() + i * d, d);
    std::span<double> act(enc.act.data() + i * d, d);
    linear_forward(w, tuple, {}, pre);
    relu_forward(pre, act);
    enc.gate[i] = sigmoid(dot(beta, act));
    axpy(enc.gate[i], act, aggregate);
  }
  axpy(1.0 / static_cast<double>(n), aggregate, enc.value);
  return enc;
}

void MoEMeta::encode_backward(const EntityEncoding& enc, std::span<const double> grad_out, GradBuffer& grads) const {
  const std::size_t d = config_.embed_dim;
  const ParamSet& p = *params_;
  axpy(1.0, grad_out, grads.row(entity_, enc.entity));
  const std::size_t n = enc.neighbors.size();
  if (n == 0) return;

  const Tensor& w = p[neighbor_w_].value;
  const auto beta = p[neighbor_beta_].value.data();
  auto grad_w = grads.dense(neighbor_w_);
  auto grad_beta = grads.dense(neighbor_beta_);
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> tuple(2 * d);
  std::vector<double> grad_act(d);
  std::vector<double> grad_pre(d);
  std::vector<double> grad_tuple(2 * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> pre(enc.pre.data() + i * d, d);
    std::span<const double> act(enc.act.data() + i * d, d);
    const double g = enc.gate[i];
    // out += (1/n) g_i act_i
    const double grad_gate = inv_n * dot(act, grad_out);
    const double grad_logit = grad_gate * sigmoid_grad_from_output(g);
    for (std::size_t k = 0; k < d; ++k) grad_act[k] = inv_n * g * grad_out[k] + grad_logit * beta[k];
    axpy(grad_logit, act, grad_beta);
    std::fill(grad_pre.begin(), grad_pre.end(), 0.0);
    relu_backward(pre, grad_act, grad_pre);

    const auto rel = p[relation_].value.row(enc.neighbors[i].relation);
    const auto ent = p[entity_].value.row(enc.neighbors[i].entity);
    std::copy(rel.begin(), rel.end(), tuple.begin());
    std::copy(ent.begin(), ent.end(), tuple.begin() + static_cast<std::ptrdiff_t>(d));
    std::fill(grad_tuple.begin(), grad_tuple.end(), 0.0);
    linear_backward(w, tuple, grad_pre, grad_w, grad_tuple, {});
    axpy(1.0, std::span<const double>(grad_tuple).first(d), grads.row(relation_, enc.neighbors[i].relation));
    axpy(1.0, std::span<const double>(grad_tuple).subspan(d), grads.row(entity_, enc.neighbors[i].entity));
  }
}

// ---- mixture of experts -------------------------------------------------------

RelationRep MoEMeta::relation_rep(std::span<const double> head, std::span<const double> tail) const {
  const std::size_t d = config_.embed_dim;
  RelationRep rep;
  rep.input.assign(head.begin(), head.end());
  rep.input.insert(rep.input.end(), tail.begin(), tail.end());
  rep.value.assign(d, 0.0);

  if (!config_.use_moe) {
    rep.expert_caches.resize(1);
    mlp_forward(mlp(relation_mlp_), rep.input, rep.expert_caches[0]);
    rep.value = rep.expert_caches[0].out;
    return rep;
  }

  const std::size_t m = config_.num_experts;
  const std::size_t top = config_.top_n;
  mlp_forward(mlp(gate_), rep.input, rep.gate_cache);
  rep.gate_scores.resize(m);
  softmax_forward(rep.gate_cache.out, rep.gate_scores);

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  const auto& s = rep.gate_scores;
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                    [&](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
  rep.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top));
  rep.gate_row.assign(m, 0.0);
  rep.expert_caches.resize(top);
  const double inv_top = 1.0 / static_cast<double>(top);
  for (std::size_t k = 0; k < top; ++k) {
    const std::size_t i = rep.selected[k];
    rep.gate_row[i] = s[i];
    mlp_forward(mlp(experts_[i]), rep.input, rep.expert_caches[k]);
    axpy(s[i] * inv_top, rep.expert_caches[k].out, rep.value);
  }
  return rep;
}

void MoEMeta::relation_rep_backward(const RelationRep& rep, std::span<const double> grad_r, GradBuffer& grads,
                                    std::span<double> grad_head, std::span<double> grad_tail) const {
  const std::size_t d = config_.embed_dim;
  std::vector<double> grad_input(2 * d, 0.0);
  if (!config_.use_moe) {
    mlp_backward(mlp(relation_mlp_), rep.expert_caches[0], grad_r, mlp_grads(relation_mlp_, grads), grad_input);
  } else {
    const std::size_t m = config_.num_experts;
    const double inv_top = 1.0 / static_cast<double>(config_.top_n);
    std::vector<double> grad_scores(m, 0.0);
    std::vector<double> grad_expert(d);
    for (std::size_t k = 0; k < rep.selected.size(); ++k) {
      const std::size_t i = rep.selected[k];
      const double weight = rep.gate_scores[i] * inv_top;
      for (std::size_t j = 0; j < d; ++j) grad_expert[j] = weight * grad_r[j];
      mlp_backward(mlp(experts_[i]), rep.expert_caches[k], grad_expert, mlp_grads(experts_[i], grads), grad_input);
      grad_scores[i] = inv_top * dot(rep.expert_caches[k].out, grad_r);
    }
    std::vector<double> grad_logits(m, 0.0);
    softmax_backward(rep.gate_scores, grad_scores, grad_logits);
    mlp_backward(mlp(gate_), rep.gate_cache, grad_logits, mlp_grads(gate_, grads), grad_input);
  }
  axpy(1.0, std::span<const double>(grad_input).first(d), grad_head);
  axpy(1.0, std::span<const double>(grad_input).subspan(d), grad_tail);
}

RelationMeta MoEMeta::relation_meta(const std::vector<std::span<const double>>& heads,
                                    const std::vector<std::span<const double>>& tails) const {
  const std::size_t d = config_.embed_dim;
  const std::size_t k = heads.size();
  if (k == 0 || tails.size() != k) fail(ErrorKind::kDimension, "relation meta needs K >= 1 matching head/tail pairs");
  RelationMeta meta;
  meta.relation.assign(d, 0.0);
  meta.gate_weights = Tensor(k, config_.num_experts);
  meta.per_triplet = Tensor(k, d);
  for (std::size_t j = 0; j < k; ++j) {
    RelationRep rep = relation_rep(heads[j], tails[j]);
    std::copy(rep.value.begin(), rep.value.end(), meta.per_triplet.row(j).begin());
    if (!rep.gate_row.empty()) std::copy(rep.gate_row.begin(), rep.gate_row.end(), meta.gate_weights.row(j).begin());
    meta.reps.push_back(std::move(rep));
  }
  for (std::size_t j = 0; j < k; ++j) axpy(1.0, meta.per_triplet.row(j), meta.relation);
  for (double& x : meta.relation) x /= static_cast<double>(k);
  return meta;
}

// ---- adaptation and episodes ---------------------------------------------------

AdaptState MoEMeta::inner_adapt(const EncodingTable& encodings, std::span<const HingeTerm> support_terms,
                                std::span<const double> relation_meta, const Eta& eta0, std::size_t steps) const {
  AdaptState state;
  state.eta = eta0;
  state.relation.assign(relation_meta.begin(), relation_meta.end());
  if (!config_.use_local_adapt) return state;
  const std::size_t d = config_.embed_dim;
  std::vector<TermEval> evals;
  for (std::size_t step = 0; step < steps; ++step) {
    hinge_forward(encodings, support_terms, &state.eta, state.relation, config_.margin, &evals);
    std::vector<double> grad_r(d, 0.0);
    Eta grad_eta = Eta::zeros(d);
    hinge_backward(evals, support_terms, &state.eta, state.relation, grad_r, &grad_eta, nullptr);
    eta_step(state.eta, grad_eta, config_.inner_lr);
    gradient_step(state.relation, grad_r, config_.inner_lr);
    ++state.steps;
  }
  return state;
}

double MoEMeta::score_adapted(const AdaptState& state, std::span<const double> head, std::span<const double> tail) const {
  if (!config_.use_local_adapt) return score(head, state.relation, tail);
  const Projected p = project(state.eta, head, state.relation, tail);
  return score(p.head, p.relation, p.tail);
}

TaskResult MoEMeta::run_task(const TaskExample& task, const NeighborCache& neighbors, const Eta& eta0,
                             std::size_t inner_steps, GradBuffer* grads) const {
  const std::size_t d = config_.embed_dim;
  const std::size_t negs = config_.negatives_per_positive;
  const bool adapt = config_.use_local_adapt;
  if (task.support.empty()) fail(ErrorKind::kSampling, "task has an empty support set");
  if (task.support_negatives.size() != task.support.size() * negs ||
      task.query_negatives.size() != task.query.size() * negs) {
    fail(ErrorKind::kDimension, "task negatives do not match negatives_per_positive");
  }

  // Encode every distinct entity of the episode once.
  std::vector<EntityEncoding> encodings;
  std::unordered_map<EntityId, std::size_t> slot_of;
  auto slot = [&](EntityId e) {
    auto [it, inserted] = slot_of.emplace(e, encodings.size());
    if (inserted) encodings.push_back(encode_entity(e, neighbors.get(e)));
    return it->second;
  };
  auto make_terms = [&](const std::vector<EntityPair>& pairs, const std::vector<EntityId>& negatives) {
    std::vector<HingeTerm> terms;
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      const std::size_t h = slot(pairs[j].head);
      const std::size_t t = slot(pairs[j].tail);
      for (std::size_t k = 0; k < negs; ++k) terms.push_back({h, t, slot(negatives[j * negs + k])});
    }
    return terms;
  };
  const auto support_terms = make_terms(task.support, task.support_negatives);
  const auto query_terms = make_terms(task.query, task.query_negatives);
  EncodingTable table;
  for (const auto& e : encodings) table.push_back(e.value);

  TaskResult result;
  std::vector<std::span<const double>> heads;
  std::vector<std::span<const double>> tails;
  for (const auto& p : task.support) {
    heads.push_back(table[slot_of.at(p.head)]);
    tails.push_back(table[slot_of.at(p.tail)]);
  }
  result.meta = relation_meta(heads, tails);

  // Inner loop, remembering every visited state for the exact reverse pass.
  const Eta zero_eta = Eta::zeros(d);
  std::vector<AdaptState> visited;
  AdaptState state;
  state.eta = adapt ? eta0 : zero_eta;
  state.relation = result.meta.relation;
  const Eta* eta_ptr = adapt ? &state.eta : nullptr;
  result.support_loss_before = hinge_loss(table, support_terms, eta_ptr, state.relation, config_.margin);
  if (adapt) {
    std::vector<TermEval> evals;
    for (std::size_t step = 0; step < inner_steps; ++step) {
      visited.push_back(state);
      hinge_forward(table, support_terms, &state.eta, state.relation, config_.margin, &evals);
      std::vector<double> grad_r(d, 0.0);
      Eta grad_eta = Eta::zeros(d);
      hinge_backward(evals, support_terms, &state.eta, state.relation, grad_r, &grad_eta, nullptr);
      eta_step(state.eta, grad_eta, config_.inner_lr);
      gradient_step(state.relation, grad_r, config_.inner_lr);
      ++state.steps;
    }
  }
  eta_ptr = adapt ? &state.eta : nullptr;
  result.support_loss_after = hinge_loss(table, support_terms, eta_ptr, state.relation, config_.margin);

  std::vector<TermEval> query_evals;
  result.query_loss = hinge_forward(table, query_terms, eta_ptr, state.relation, config_.margin, &query_evals);
  result.adapted = state;
  result.eta_grad = Eta::zeros(d);
  result.finite = std::isfinite(result.query_loss) && std::isfinite(result.support_loss_before) &&
                  std::isfinite(result.support_loss_after);
  if (!grads || !result.finite) return result;

  // Reverse pass.
  GradTable grad_enc(encodings.size(), std::vector<double>(d, 0.0));
  std::vector<double> grad_r(d, 0.0);
  Eta grad_eta = Eta::zeros(d);
  hinge_backward(query_evals, query_terms, eta_ptr, state.relation, grad_r, adapt ? &grad_eta : nullptr, &grad_enc);

  if (adapt && config_.meta_gradient == MetaGradient::kExact) {
    // u_{k+1} = u_k - a grad L_S(u_k, X): pull the cotangent w back through each step,
    // w <- w - a H_uu w, and send -a H_Xu w to the support encodings.
    std::vector<TermEval> evals;
    for (std::size_t k = visited.size(); k-- > 0;) {
      const AdaptState& u = visited[k];
      hinge_forward(table, support_terms, &u.eta, u.relation, config_.margin, &evals);
      std::vector<double> hvp_r(d, 0.0);
      Eta hvp_eta = Eta::zeros(d);
      GradTable hvp_enc(encodings.size(), std::vector<double>(d, 0.0));
      hinge_hvp(evals, support_terms, u.eta, u.relation, grad_eta, grad_r, hvp_r, hvp_eta, hvp_enc);
      axpy(-config_.inner_lr, hvp_r, grad_r);
      eta_axpy(-config_.inner_lr, hvp_eta, grad_eta);
      for (std::size_t i = 0; i < grad_enc.size(); ++i) axpy(-config_.inner_lr, hvp_enc[i], grad_enc[i]);
    }
  }
  result.eta_grad = grad_eta;

  // R_T is the mean of the per-triplet relation vectors.
  std::vector<double> grad_rep(d);
  const double inv_k = 1.0 / static_cast<double>(task.support.size());
  for (std::size_t j = 0; j < task.support.size(); ++j) {
    for (std::size_t i = 0; i < d; ++i) grad_rep[i] = inv_k * grad_r[i];
    relation_rep_backward(result.meta.reps[j], grad_rep, *grads, grad_enc[slot_of.at(task.support[j].head)],
                          grad_enc[slot_of.at(task.support[j].tail)]);
  }
  for (std::size_t i = 0; i < encodings.size(); ++i) encode_backward(encodings[i], grad_enc[i], *grads);

  if (!eta_finite(result.eta_grad) || !grads->all_finite()) result.finite = false;
  return result;
}

}  // namespace moemeta
