#include "circuitscope/sgtmodel.hpp"

#include <cmath>

namespace circuitscope::sgtmodel {

namespace {

std::string pair_prefix(int pair, const char* kind) {
  return "enc.p" + std::to_string(pair) + "." + kind + ".";
}

// standard sinusoidal encoding over the timestep index
Matrix positional_encoding(int timesteps, int dim) {
  Matrix pe(timesteps, dim);
  for (int t = 0; t < timesteps; ++t) {
    for (int k = 0; k < dim; k += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(k) / dim);
      pe.at(t, k) = std::sin(t * freq);
      if (k + 1 < dim) pe.at(t, k + 1) = std::cos(t * freq);
    }
  }
  return pe;
}

void add_attention_params(ParameterStore& store, const std::string& prefix, int dim, int heads) {
  const int dh = dim / heads;
  for (int h = 0; h < heads; ++h) {
    store.add(prefix + "q" + std::to_string(h), dim, dh);
    store.add(prefix + "k" + std::to_string(h), dim, dh);
    store.add(prefix + "v" + std::to_string(h), dim, dh);
  }
  store.add(prefix + "o", dim, dim);
}

// shared multi-head attention core; bias_logits (optional) is added to every
// head's logits, mask (optional) restricts the softmax support
ValueId attention_block(Tape& tape, ParameterStore& store, const std::string& prefix,
                        ValueId input, ValueId residual_source, const SgtConfig& cfg,
                        ValueId bias_logits, const std::vector<uint8_t>& mask,
                        std::vector<ValueId>* attn_probe) {
  const int dh = cfg.embed_dim / cfg.heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ValueId> heads;
  heads.reserve(cfg.heads);
  for (int h = 0; h < cfg.heads; ++h) {
    const std::string hs = std::to_string(h);
    ValueId q = tape.matmul(input, tape.param(store.at(prefix + "q" + hs)));
    ValueId k = tape.matmul(input, tape.param(store.at(prefix + "k" + hs)));
    ValueId v = tape.matmul(input, tape.param(store.at(prefix + "v" + hs)));
    ValueId logits = tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_dh);
    if (bias_logits >= 0) logits = tape.add(logits, bias_logits);
    ValueId attn = mask.empty() ? tape.softmax_rows(logits)
                                : tape.softmax_rows_masked(logits, mask);
    if (attn_probe) attn_probe->push_back(attn);
    heads.push_back(tape.matmul(attn, v));
  }
  ValueId merged = cfg.heads == 1 ? heads[0] : tape.concat_cols(heads);
  ValueId projected = tape.matmul(merged, tape.param(store.at(prefix + "o")));
  return tape.layer_norm_rows(tape.add(residual_source, projected));
}

}  // namespace

void validate(const SgtConfig& cfg) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::Validation, msg); };
  if (cfg.embed_dim < 1) fail("embed_dim must be >= 1");
  if (cfg.heads < 1) fail("heads must be >= 1");
  if (cfg.embed_dim % cfg.heads != 0) fail("embed_dim must be divisible by heads");
  if (cfg.layer_pairs < 1) fail("layer_pairs must be >= 1");
  if (cfg.temporal_radius < 1) fail("temporal_radius must be >= 1");
}

void add_encoder_params(ParameterStore& store, const SgtConfig& cfg, int feature_dim) {
  validate(cfg);
  if (feature_dim < 1) throw Error(ErrorKind::Validation, "feature_dim must be >= 1");
  store.add("enc.in.w", feature_dim, cfg.embed_dim);
  store.add("enc.in.b", 1, cfg.embed_dim, feature_dim);
  for (int p = 0; p < cfg.layer_pairs; ++p) {
    add_attention_params(store, pair_prefix(p, "sp"), cfg.embed_dim, cfg.heads);
    Tensor& lambda = store.add(pair_prefix(p, "sp") + "lambda", 1, 1);
    lambda.values[0] = cfg.adjacency_bias_weight;
    add_attention_params(store, pair_prefix(p, "tm"), cfg.embed_dim, cfg.heads);
  }
}

ValueId spatial_attention_layer(Tape& tape, ParameterStore& store, const std::string& prefix,
                                ValueId embeddings, const Matrix& adjacency, const SgtConfig& cfg,
                                std::vector<ValueId>* attn_probe) {
  ValueId bias = tape.scalar_mul(tape.param(store.at(prefix + "lambda")), tape.constant(adjacency));
  return attention_block(tape, store, prefix, embeddings, embeddings, cfg, bias, {}, attn_probe);
}

ValueId temporal_attention_layer(Tape& tape, ParameterStore& store, const std::string& prefix,
                                 ValueId embeddings, int timesteps, const SgtConfig& cfg,
                                 std::vector<ValueId>* attn_probe) {
  ValueId with_pe =
      tape.add(embeddings, tape.constant(positional_encoding(timesteps, cfg.embed_dim)));
  std::vector<uint8_t> mask(static_cast<size_t>(timesteps) * timesteps, 0);
  for (int t = 0; t < timesteps; ++t) {
    for (int u = 0; u < timesteps; ++u) {
      if (std::abs(t - u) <= cfg.temporal_radius) mask[static_cast<size_t>(t) * timesteps + u] = 1;
    }
  }
  return attention_block(tape, store, prefix, with_pe, with_pe, cfg, -1, mask, attn_probe);
}

ValueId encode_on_tape(Tape& tape, ParameterStore& store, const DynamicBrainNetwork& net,
                       const SgtConfig& cfg, std::vector<ValueId>* attn_probe) {
  validate(cfg);
  const int t_count = net.timesteps();
  const int m = net.regions();
  if (t_count < 1 || m < 1) throw Error(ErrorKind::Validation, "network has no snapshots");

  // stack all snapshot features time-major and project to the embed dim
  const int feat = net.snapshots.front().node_features.cols;
  Tensor stacked(t_count * m, feat);
  for (int t = 0; t < t_count; ++t) {
    const Matrix& x = net.snapshots[t].node_features;
    std::copy(x.v.begin(), x.v.end(), stacked.values.begin() + static_cast<size_t>(t) * m * feat);
  }
  ValueId emb = tape.add(tape.matmul(tape.constant(stacked), tape.param(store.at("enc.in.w"))),
                         tape.param(store.at("enc.in.b")));

  for (int p = 0; p < cfg.layer_pairs; ++p) {
    // spatial: every snapshot independently
    std::vector<ValueId> per_t;
    per_t.reserve(t_count);
    for (int t = 0; t < t_count; ++t) {
      std::vector<int> rows(m);
      for (int i = 0; i < m; ++i) rows[i] = t * m + i;
      ValueId snap = tape.gather_rows(emb, rows);
      per_t.push_back(spatial_attention_layer(tape, store, pair_prefix(p, "sp"), snap,
                                              net.snapshots[t].adjacency, cfg, attn_probe));
    }
    emb = t_count == 1 ? per_t[0] : tape.concat_rows(per_t);

    // temporal: every region's timeline independently (region-major result)
    std::vector<ValueId> per_region;
    per_region.reserve(m);
    for (int i = 0; i < m; ++i) {
      std::vector<int> rows(t_count);
      for (int t = 0; t < t_count; ++t) rows[t] = t * m + i;
      ValueId timeline = tape.gather_rows(emb, rows);
      per_region.push_back(temporal_attention_layer(tape, store, pair_prefix(p, "tm"), timeline,
                                                    t_count, cfg, attn_probe));
    }
    ValueId region_major = m == 1 ? per_region[0] : tape.concat_rows(per_region);
    // back to time-major row order t*M+i
    std::vector<int> to_time_major(static_cast<size_t>(t_count) * m);
    for (int t = 0; t < t_count; ++t) {
      for (int i = 0; i < m; ++i) to_time_major[static_cast<size_t>(t) * m + i] = i * t_count + t;
    }
    emb = tape.gather_rows(region_major, to_time_major);
  }
  return emb;
}

ValueId readout_on_tape(Tape& tape, ValueId embeddings) {
  return tape.sigmoid(tape.mean_rows(embeddings));
}

ValueId decode_fc_on_tape(Tape& tape, ValueId embeddings_t, int dim) {
  ValueId gram = tape.matmul(embeddings_t, tape.transpose(embeddings_t));
  return tape.tanh(tape.scale(gram, 1.0 / std::sqrt(static_cast<double>(dim))));
}

ValueId reconstruction_loss_on_tape(Tape& tape, ValueId embeddings, const DynamicBrainNetwork& net,
                                    int dim) {
  const int t_count = net.timesteps();
  const int m = net.regions();
  if (m < 2) throw Error(ErrorKind::Validation, "reconstruction loss needs >= 2 regions");
  Matrix offdiag_mask(m, m, 1.0);
  for (int i = 0; i < m; ++i) offdiag_mask.at(i, i) = 0.0;
  ValueId mask = tape.constant(offdiag_mask);
  ValueId total = -1;
  for (int t = 0; t < t_count; ++t) {
    std::vector<int> rows(m);
    for (int i = 0; i < m; ++i) rows[i] = t * m + i;
    ValueId decoded = decode_fc_on_tape(tape, tape.gather_rows(embeddings, rows), dim);
    ValueId diff = tape.mul(tape.sub(decoded, tape.constant(net.snapshots[t].adjacency)), mask);
    ValueId sq = tape.mean_all(tape.mul(diff, diff));
    total = total < 0 ? sq : tape.add(total, sq);
  }
  // mean_all divides by m*m per snapshot; renormalize to off-diagonal count
  return tape.scale(total, static_cast<double>(m) / ((m - 1.0) * t_count));
}

NodeEmbeddings encode(const DynamicBrainNetwork& net, ParameterStore& store, const SgtConfig& cfg) {
  Tape tape;
  ValueId emb = encode_on_tape(tape, store, net, cfg);
  NodeEmbeddings out;
  out.timesteps = net.timesteps();
  out.regions = net.regions();
  out.dim = cfg.embed_dim;
  out.flat = Matrix(out.timesteps * out.regions, out.dim);
  out.flat.v = tape.values_of(emb);
  return out;
}

std::vector<double> readout(const NodeEmbeddings& emb) {
  std::vector<double> g(emb.dim, 0.0);
  const int rows = emb.timesteps * emb.regions;
  for (int r = 0; r < rows; ++r) {
    const double* x = emb.flat.row_ptr(r);
    for (int k = 0; k < emb.dim; ++k) g[k] += x[k];
  }
  for (int k = 0; k < emb.dim; ++k) {
    const double v = g[k] / rows;
    g[k] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return g;
}

Matrix decode_fc(const NodeEmbeddings& emb, int t) {
  const int m = emb.regions;
  Matrix out(m, m);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(emb.dim));
  for (int i = 0; i < m; ++i) {
    out.at(i, i) = 1.0;  // reported as 1 by convention
    for (int j = i + 1; j < m; ++j) {
      double dot = 0.0;
      const double* zi = emb.at(t, i);
      const double* zj = emb.at(t, j);
      for (int k = 0; k < emb.dim; ++k) dot += zi[k] * zj[k];
      const double w = std::tanh(dot * inv_sqrt_d);
      out.at(i, j) = w;
      out.at(j, i) = w;
    }
  }
  return out;
}

double reconstruction_loss(const DynamicBrainNetwork& net, ParameterStore& store,
                           const SgtConfig& cfg) {
  Tape tape;
  ValueId emb = encode_on_tape(tape, store, net, cfg);
  return tape.scalar_value(reconstruction_loss_on_tape(tape, emb, net, cfg.embed_dim));
}

}  // namespace circuitscope::sgtmodel
