#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "circuitscope/diffcore.hpp"
#include "circuitscope/rng.hpp"
#include "circuitscope/sgtmodel.hpp"

namespace circuitscope::contrastive {

using connectome::DynamicBrainNetwork;
using diffcore::ParameterStore;
using diffcore::SgdOptimizer;
using diffcore::Tape;
using diffcore::ValueId;
using sgtmodel::SgtConfig;

enum class Objective { InfoNce, InfoMax };

struct ContrastiveConfig {
  int negatives_per_positive = 5;  // K
  int positives_per_subject = 64;  // sampled (region,timestep) cells per step
  double alpha_reconstruction = 1.0;
  int epochs = 50;
  Objective objective = Objective::InfoNce;
};

void validate(const ContrastiveConfig& cfg);

// Negative-sample manufacture: node features are row-shuffled by one
// permutation drawn per timestep; the adjacency is kept intact.
DynamicBrainNetwork corrupt_network(const DynamicBrainNetwork& net, uint64_t seed);

// bilinear estimator parameters ("est.w", d x d)
void add_estimator_params(ParameterStore& store, int dim);

// batched local^T W global for rows of locals -> [n, 1]
ValueId estimator_scores_on_tape(Tape& tape, ValueId locals, ValueId global, ValueId w);

double estimator_score(const std::vector<double>& local, const std::vector<double>& global,
                       const Matrix& w);

// InfoNCE over positive rows with K negatives each (negatives row-major,
// K consecutive rows per positive): mean of logsumexp([s_p, s_n1..s_nK]) - s_p
ValueId infonce_loss_on_tape(Tape& tape, ValueId positive_locals, ValueId negative_locals,
                             ValueId global, ValueId w, int negatives_per_positive);

// binary cross-entropy InfoMax variant (ablation switch)
ValueId infomax_loss_on_tape(Tape& tape, ValueId positive_locals, ValueId negative_locals,
                             ValueId global, ValueId w, int negatives_per_positive);

// Samples positive cells and per-positive negatives and assembles the
// configured contrastive objective for one network already encoded on the
// tape. emb/emb_corrupt have row order t*M+i.
ValueId contrastive_loss_for_subject(Tape& tape, ParameterStore& store, ValueId emb,
                                     ValueId emb_corrupt, int timesteps, int regions,
                                     const ContrastiveConfig& cfg, Rng& sampler);

struct EpochTrace {
  int epoch = 0;
  double contrastive = 0.0;
  double reconstruction = 0.0;
  double total = 0.0;
};

struct PretrainResult {
  std::vector<EpochTrace> trace;
};

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double clip_norm = 5.0;
};

// Pretrains encoder + estimator on control-group networks by minimizing
// infonce + alpha * reconstruction with one optimizer step per subject.
// All networks must be Saline.
PretrainResult pretrain_encoder(const std::vector<const DynamicBrainNetwork*>& saline_networks,
                                ParameterStore& store, const SgtConfig& model_cfg,
                                const ContrastiveConfig& cfg, const OptimizerConfig& opt_cfg,
                                uint64_t seed);

}  // namespace circuitscope::contrastive
