#include "circuitscope/contrastive.hpp"

#include <algorithm>
#include <cmath>

namespace circuitscope::contrastive {

void validate(const ContrastiveConfig& cfg) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::Validation, msg); };
  if (cfg.negatives_per_positive < 1) fail("negatives_per_positive must be >= 1");
  if (cfg.positives_per_subject < 1) fail("positives_per_subject must be >= 1");
  if (cfg.alpha_reconstruction < 0.0) fail("alpha_reconstruction must be >= 0");
  if (cfg.epochs < 1) fail("epochs must be >= 1");
}

DynamicBrainNetwork corrupt_network(const DynamicBrainNetwork& net, uint64_t seed) {
  DynamicBrainNetwork out = net;
  const int m = net.regions();
  for (int t = 0; t < net.timesteps(); ++t) {
    Rng rng = Rng::derive(seed, 300, static_cast<uint64_t>(t));
    std::vector<int> perm(m);
    for (int i = 0; i < m; ++i) perm[i] = i;
    rng.shuffle(perm);
    const Matrix& src = net.snapshots[t].node_features;
    Matrix& dst = out.snapshots[t].node_features;
    for (int i = 0; i < m; ++i) {
      std::copy(src.row_ptr(perm[i]), src.row_ptr(perm[i]) + src.cols, dst.row_ptr(i));
    }
  }
  return out;
}

void add_estimator_params(ParameterStore& store, int dim) {
  store.add("est.w", dim, dim);
}

ValueId estimator_scores_on_tape(Tape& tape, ValueId locals, ValueId global, ValueId w) {
  return tape.matmul(tape.matmul(locals, w), tape.transpose(global));
}

double estimator_score(const std::vector<double>& local, const std::vector<double>& global,
                       const Matrix& w) {
  if (local.size() != static_cast<size_t>(w.rows) || global.size() != static_cast<size_t>(w.cols)) {
    throw Error(ErrorKind::Computation, "estimator_score: dimension mismatch");
  }
  double s = 0.0;
  for (int i = 0; i < w.rows; ++i) {
    double row = 0.0;
    for (int j = 0; j < w.cols; ++j) row += w.at(i, j) * global[j];
    s += local[i] * row;
  }
  return s;
}

ValueId infonce_loss_on_tape(Tape& tape, ValueId positive_locals, ValueId negative_locals,
                             ValueId global, ValueId w, int negatives_per_positive) {
  const int p = tape.rows_of(positive_locals);
  ValueId sp = estimator_scores_on_tape(tape, positive_locals, global, w);            // [P,1]
  ValueId sn = estimator_scores_on_tape(tape, negative_locals, global, w);            // [P*K,1]
  ValueId grouped = tape.reshape(sn, p, negatives_per_positive);                      // [P,K]
  ValueId all = tape.concat_cols({sp, grouped});                                      // [P,K+1]
  return tape.mean_all(tape.sub(tape.logsumexp_rows(all), sp));
}

namespace {

// log(1 + exp(x)) via logsumexp over [0, x]
ValueId softplus_rows(Tape& tape, ValueId x) {
  Tensor zeros(tape.rows_of(x), 1, 0.0);
  return tape.logsumexp_rows(tape.concat_cols({tape.constant(zeros), x}));
}

}  // namespace

ValueId infomax_loss_on_tape(Tape& tape, ValueId positive_locals, ValueId negative_locals,
                             ValueId global, ValueId w, int /*negatives_per_positive*/) {
  ValueId sp = estimator_scores_on_tape(tape, positive_locals, global, w);
  ValueId sn = estimator_scores_on_tape(tape, negative_locals, global, w);
  ValueId pos_term = tape.mean_all(softplus_rows(tape, tape.scale(sp, -1.0)));
  ValueId neg_term = tape.mean_all(softplus_rows(tape, sn));
  return tape.scale(tape.add(pos_term, neg_term), 0.5);
}

ValueId contrastive_loss_for_subject(Tape& tape, ParameterStore& store, ValueId emb,
                                     ValueId emb_corrupt, int timesteps, int regions,
                                     const ContrastiveConfig& cfg, Rng& sampler) {
  const int cells = timesteps * regions;
  const int want = std::min(cfg.positives_per_subject, cells);

  // positives: distinct cells of the true network
  std::vector<int> all_cells(cells);
  for (int i = 0; i < cells; ++i) all_cells[i] = i;
  sampler.shuffle(all_cells);
  std::vector<int> pos_idx(all_cells.begin(), all_cells.begin() + want);

  // negatives: K corrupted cells per positive, drawn with replacement
  std::vector<int> neg_idx;
  neg_idx.reserve(static_cast<size_t>(want) * cfg.negatives_per_positive);
  for (int i = 0; i < want * cfg.negatives_per_positive; ++i) {
    neg_idx.push_back(static_cast<int>(sampler.below(static_cast<uint64_t>(cells))));
  }

  ValueId pos = tape.gather_rows(emb, pos_idx);
  ValueId neg = tape.gather_rows(emb_corrupt, neg_idx);
  ValueId global = sgtmodel::readout_on_tape(tape, emb);
  ValueId w = tape.param(store.at("est.w"));
  return cfg.objective == Objective::InfoNce
             ? infonce_loss_on_tape(tape, pos, neg, global, w, cfg.negatives_per_positive)
             : infomax_loss_on_tape(tape, pos, neg, global, w, cfg.negatives_per_positive);
}

PretrainResult pretrain_encoder(const std::vector<const DynamicBrainNetwork*>& saline_networks,
                                ParameterStore& store, const SgtConfig& model_cfg,
                                const ContrastiveConfig& cfg, const OptimizerConfig& opt_cfg,
                                uint64_t seed) {
  validate(cfg);
  sgtmodel::validate(model_cfg);
  if (saline_networks.empty()) {
    throw Error(ErrorKind::Validation, "pretraining needs at least one saline network");
  }
  for (const auto* net : saline_networks) {
    if (net->group != synthcohort::GroupLabel::Saline) {
      throw Error(ErrorKind::Validation,
                  "pretraining input must be saline; got " + net->subject_id);
    }
  }
  if (!store.has("enc.in.w") || !store.has("est.w")) {
    throw Error(ErrorKind::State, "parameter store is missing encoder or estimator parameters");
  }

  SgdOptimizer opt;
  opt.learning_rate = opt_cfg.learning_rate;
  opt.momentum = opt_cfg.momentum;
  opt.clip_norm = opt_cfg.clip_norm;

  const int n = static_cast<int>(saline_networks.size());
  PretrainResult result;
  result.trace.reserve(cfg.epochs);
  Tape tape;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng order_rng = Rng::derive(seed, 40, static_cast<uint64_t>(epoch));
    order_rng.shuffle(order);

    EpochTrace row;
    row.epoch = epoch + 1;
    for (int k = 0; k < n; ++k) {
      const DynamicBrainNetwork& net = *saline_networks[order[k]];
      const uint64_t step_id = static_cast<uint64_t>(epoch) * n + order[k];
      DynamicBrainNetwork corrupted = corrupt_network(net, Rng::derive(seed, 41, step_id).next_u64());
      Rng sampler = Rng::derive(seed, 42, step_id);

      tape.reset();
      ValueId emb = sgtmodel::encode_on_tape(tape, store, net, model_cfg);
      ValueId emb_c = sgtmodel::encode_on_tape(tape, store, corrupted, model_cfg);
      ValueId closs = contrastive_loss_for_subject(tape, store, emb, emb_c, net.timesteps(),
                                                   net.regions(), cfg, sampler);
      ValueId rloss = sgtmodel::reconstruction_loss_on_tape(tape, emb, net, model_cfg.embed_dim);
      ValueId total = tape.add(closs, tape.scale(rloss, cfg.alpha_reconstruction));

      store.zero_grads();
      tape.backward(total);
      opt.step(store);

      row.contrastive += tape.scalar_value(closs);
      row.reconstruction += tape.scalar_value(rloss);
      row.total += tape.scalar_value(total);
    }
    row.contrastive /= n;
    row.reconstruction /= n;
    row.total /= n;
    result.trace.push_back(row);
  }
  return result;
}

}  // namespace circuitscope::contrastive
