#pragma once

// The few-shot relational learner: attentive neighbor encoder, sparsely gated
// mixture-of-experts relation learner, task-local projection adaptation with
// inner gradient steps, translational scoring and margin losses. Every
// backward pass is hand-derived.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moemeta/blocks.hpp"
#include "moemeta/graph.hpp"
#include "moemeta/params.hpp"
#include "moemeta/rng.hpp"

namespace moemeta {

enum class EtaInit { kZero, kGaussian };

// How the query-loss gradient treats the inner adaptation steps.
//   kFirstOrder: adapted (eta, R) are differentiated as if the inner updates
//                were constants.
//   kExact:      also back-propagates through the inner updates using
//                Hessian-vector products of the support loss.
enum class MetaGradient { kFirstOrder, kExact };

struct ModelConfig {
  std::size_t embed_dim = 100;
  std::size_t num_experts = 32;
  std::size_t top_n = 5;
  std::size_t expert_hidden = 64;
  std::size_t gate_hidden = 64;
  std::size_t neighbor_cap = 50;
  double margin = 1.0;
  double inner_lr = 1e-3;
  std::size_t inner_steps = 1;
  std::size_t test_inner_steps = 1;
  EtaInit eta_init = EtaInit::kZero;
  double eta_init_std = 0.01;
  bool use_neighbor_agg = true;
  bool use_moe = true;
  bool use_local_adapt = true;
  bool freeze_embeddings = false;
  MetaGradient meta_gradient = MetaGradient::kFirstOrder;
  std::size_t negatives_per_positive = 1;
};

void validate(const ModelConfig& config);
nlohmann::json to_json(const ModelConfig& config);
// Reads the keys of `doc` that name ModelConfig fields, leaving the rest alone.
void apply_model_json(const nlohmann::json& doc, ModelConfig& config);

// Task-local projection vectors.
struct Eta {
  std::vector<double> head;
  std::vector<double> relation;
  std::vector<double> tail;

  static Eta zeros(std::size_t dim);
  static Eta gaussian(std::size_t dim, double stddev, Rng& rng);
};

struct AdaptState {
  Eta eta;
  std::vector<double> relation;  // the adapted relation-meta
  std::size_t steps = 0;
};

struct Projected {
  std::vector<double> head;
  std::vector<double> relation;
  std::vector<double> tail;
};

// h' = h + (p_h.R) R,  R' = R + (p_r.R) R,  t' = t + (p_t.R) R
Projected project(const Eta& eta, std::span<const double> head, std::span<const double> relation,
                  std::span<const double> tail);
// ||h + R - t||_2; lower is more plausible.
double score(std::span<const double> head, std::span<const double> relation, std::span<const double> tail);
// Sum over pairs of max(0, pos + margin - neg); equal lengths required.
double margin_loss(std::span<const double> positive, std::span<const double> negative, double margin);

struct EntityEncoding {
  EntityId entity = 0;
  std::vector<double> value;
  std::span<const Neighbor> neighbors;
  std::vector<double> pre;   // n x d, W c_i
  std::vector<double> act;   // n x d, ReLU(W c_i)
  std::vector<double> gate;  // n, sigmoid(beta . act_i)
};

struct RelationRep {
  std::vector<double> input;         // h (+) t
  std::vector<double> value;         // r_j
  std::vector<double> gate_scores;   // full softmax over experts
  std::vector<double> gate_row;      // sparsified weights
  std::vector<std::size_t> selected; // chosen experts, best first
  MlpCache gate_cache;
  std::vector<MlpCache> expert_caches;  // parallel to `selected` (or the single relation MLP)
};

struct RelationMeta {
  std::vector<double> relation;  // R_T
  Tensor gate_weights;           // K x M
  Tensor per_triplet;            // K x d
  std::vector<RelationRep> reps;
};

// A task with its corrupted tails fixed: negatives[j * n + k] corrupts pair j.
struct TaskExample {
  RelationId relation = 0;
  std::vector<EntityPair> support;
  std::vector<EntityId> support_negatives;
  std::vector<EntityPair> query;
  std::vector<EntityId> query_negatives;
};

TaskExample attach_negatives(const KnowledgeGraph& graph, const Task& task, std::size_t negatives_per_positive,
                             Rng& rng);

struct TaskResult {
  double query_loss = 0.0;
  double support_loss_before = 0.0;
  double support_loss_after = 0.0;
  RelationMeta meta;
  AdaptState adapted;
  Eta eta_grad;  // dL(Q)/d(initial eta)
  bool finite = true;
};

// One hinge term max(0, s(h, t) + margin - s(h, t')), by slot into an encoding table.
struct HingeTerm {
  std::size_t head = 0;
  std::size_t tail = 0;
  std::size_t negative = 0;
};

using EncodingTable = std::vector<std::span<const double>>;

// Sum of hinge terms. `eta` null means the unprojected translation score.
double hinge_loss(const EncodingTable& encodings, std::span<const HingeTerm> terms, const Eta* eta,
                  std::span<const double> relation, double margin);

struct MlpIndex {
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
};

ParamSet create_params(const ModelConfig& config, const KnowledgeGraph& graph, Rng& rng);

// Read-only view of a ParamSet as the network. Never mutates parameters, so
// one instance can be shared by concurrent task workers.
class MoEMeta {
 public:
  // Resolves every group by name; shape disagreement with `config` raises a load error.
  MoEMeta(const ModelConfig& config, const ParamSet& params);

  const ModelConfig& config() const noexcept { return config_; }
  const ParamSet& params() const noexcept { return *params_; }
  std::size_t entity_group() const noexcept { return entity_; }
  std::size_t relation_group() const noexcept { return relation_; }
  // Groups updated row-wise (the embedding tables).
  std::vector<std::size_t> row_sparse_groups() const { return {entity_, relation_}; }

  EntityEncoding encode_entity(EntityId entity, std::span<const Neighbor> neighbors) const;
  void encode_backward(const EntityEncoding& enc, std::span<const double> grad_out, GradBuffer& grads) const;

  RelationRep relation_rep(std::span<const double> head, std::span<const double> tail) const;
  void relation_rep_backward(const RelationRep& rep, std::span<const double> grad_r, GradBuffer& grads,
                             std::span<double> grad_head, std::span<double> grad_tail) const;

  RelationMeta relation_meta(const std::vector<std::span<const double>>& heads,
                             const std::vector<std::span<const double>>& tails) const;

  // Inner-loop adaptation of (eta, R): `steps` plain gradient steps on the
  // support hinge loss with the encodings held fixed.
  AdaptState inner_adapt(const EncodingTable& encodings, std::span<const HingeTerm> support_terms,
                         std::span<const double> relation_meta, const Eta& eta0, std::size_t steps) const;

  // Plausibility of (h, ?, t) under an adapted state (projected when local
  // adaptation is on, plain translation otherwise).
  double score_adapted(const AdaptState& state, std::span<const double> head, std::span<const double> tail) const;

  // Full episode: encode, relation-meta, inner adaptation, query loss. When
  // `grads` is non-null, accumulates dL(Q)/dPhi into it and fills eta_grad.
  TaskResult run_task(const TaskExample& task, const NeighborCache& neighbors, const Eta& eta0,
                      std::size_t inner_steps, GradBuffer* grads) const;

 private:
  MlpWeights mlp(const MlpIndex& idx) const;
  MlpGrads mlp_grads(const MlpIndex& idx, GradBuffer& grads) const;

  ModelConfig config_;
  const ParamSet* params_;
  std::size_t entity_ = 0;
  std::size_t relation_ = 0;
  std::size_t neighbor_w_ = 0;
  std::size_t neighbor_beta_ = 0;
  std::vector<MlpIndex> experts_;
  MlpIndex gate_;
  MlpIndex relation_mlp_;
};

}  // namespace moemeta
