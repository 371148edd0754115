#pragma once

#include <string>
#include <vector>

#include "circuitscope/connectome.hpp"
#include "circuitscope/diffcore.hpp"

namespace circuitscope::sgtmodel {

using connectome::DynamicBrainNetwork;
using diffcore::ParameterStore;
using diffcore::Tape;
using diffcore::Tensor;
using diffcore::ValueId;

struct SgtConfig {
  int embed_dim = 32;  // d
  int heads = 4;       // d divisible by heads
  int layer_pairs = 2;
  int temporal_radius = 1;
  double adjacency_bias_weight = 1.0;  // lambda init; learnable per spatial layer
};

void validate(const SgtConfig& cfg);

// Per-region, per-timestep latent vectors; row t*regions + i of flat.
struct NodeEmbeddings {
  int timesteps = 0;
  int regions = 0;
  int dim = 0;
  Matrix flat;  // (T*M) x d

  const double* at(int t, int i) const { return flat.row_ptr(t * regions + i); }
};

// Registers all encoder parameters under the "enc." prefix. feature_dim is
// the snapshot feature width (window length). Lambda values are set to the
// configured adjacency bias weight rather than the random init scheme.
void add_encoder_params(ParameterStore& store, const SgtConfig& cfg, int feature_dim);

// One spatial attention block over a single snapshot: head logits are
// (Q K^T)/sqrt(d/h) + lambda * adjacency, rows softmaxed, output projected,
// residual-added, layer-normalized. Collects per-head attention nodes when
// attn_probe is non-null.
ValueId spatial_attention_layer(Tape& tape, ParameterStore& store, const std::string& prefix,
                                ValueId embeddings, const Matrix& adjacency, const SgtConfig& cfg,
                                std::vector<ValueId>* attn_probe = nullptr);

// One temporal attention block over a single region's timeline. Sinusoidal
// positional encodings are added to the inputs; attention is masked to
// |t - t'| <= temporal_radius.
ValueId temporal_attention_layer(Tape& tape, ParameterStore& store, const std::string& prefix,
                                 ValueId embeddings, int timesteps, const SgtConfig& cfg,
                                 std::vector<ValueId>* attn_probe = nullptr);

// Full encoder on the tape: input projection then layer_pairs alternations of
// (spatial over each snapshot, temporal over each region). Output [T*M, d],
// row order t*M+i.
ValueId encode_on_tape(Tape& tape, ParameterStore& store, const DynamicBrainNetwork& net,
                       const SgtConfig& cfg, std::vector<ValueId>* attn_probe = nullptr);

// sigmoid(mean over regions and timesteps) -> [1, d]
ValueId readout_on_tape(Tape& tape, ValueId embeddings);

// tanh(Z Z^T / sqrt(d)) for one timestep's embeddings -> [M, M]
ValueId decode_fc_on_tape(Tape& tape, ValueId embeddings_t, int dim);

// mean squared error between decoded and true adjacency over all
// off-diagonal entries and all timesteps
ValueId reconstruction_loss_on_tape(Tape& tape, ValueId embeddings, const DynamicBrainNetwork& net,
                                    int dim);

// forward-only conveniences
NodeEmbeddings encode(const DynamicBrainNetwork& net, ParameterStore& store, const SgtConfig& cfg);
std::vector<double> readout(const NodeEmbeddings& emb);
Matrix decode_fc(const NodeEmbeddings& emb, int t);  // diagonal reported as 1
double reconstruction_loss(const DynamicBrainNetwork& net, ParameterStore& store,
                           const SgtConfig& cfg);

}  // namespace circuitscope::sgtmodel
