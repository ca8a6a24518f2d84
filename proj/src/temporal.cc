#include "tsed/temporal.h"

#include <algorithm>
#include <cmath>

#include <lapacke.h>

namespace tsed {

using Eigen::ArrayXXd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kLinear: return "linear";
    case ModelKind::kGru: return "gru";
    case ModelKind::kLstm: return "lstm";
    case ModelKind::kEsn: return "esn";
  }
  return "unknown";
}

std::string to_string(Direction d) { return d == Direction::kBi ? "bi" : "uni"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "linear") return ModelKind::kLinear;
  if (s == "gru") return ModelKind::kGru;
  if (s == "lstm") return ModelKind::kLstm;
  if (s == "esn") return ModelKind::kEsn;
  throw Error("unknown model kind '" + s + "' (expected linear, gru, lstm or esn)");
}

int ModuleConfig::num_layers() const {
  switch (kind) {
    case ModelKind::kLinear: return 0;
    case ModelKind::kEsn: return 1;
    default: return layers;
  }
}

int ModuleConfig::exposed_dim() const {
  if (kind == ModelKind::kLinear) return stack_input_dim();
  return hidden * num_directions();
}

void ModuleConfig::validate() const {
  if (input_dim < 1) throw Error("module input_dim must be >= 1");
  if (input_projection && *input_projection < 1) throw Error("input projection width must be >= 1");
  if (kind == ModelKind::kLinear && bidirectional())
    throw Error("the linear baseline has no temporal direction; use --uni");
  if (kind != ModelKind::kLinear && hidden < 1) throw Error("hidden size must be >= 1");
  if ((kind == ModelKind::kGru || kind == ModelKind::kLstm) && layers < 1)
    throw Error("gru/lstm need at least one layer");
  if (dropout < 0.0 || dropout >= 1.0) throw Error("dropout must lie in [0, 1)");
  if (kind == ModelKind::kEsn) {
    if (input_projection) throw Error("esn reservoirs read the frontend features directly; no input projection");
    if (!(esn.spectral_radius > 0.0)) throw Error("esn spectral radius must be positive");
    if (!(esn.leak > 0.0 && esn.leak <= 1.0)) throw Error("esn leak rate must lie in (0, 1]");
    if (!(esn.density > 0.0 && esn.density <= 1.0)) throw Error("esn density must lie in (0, 1]");
    if (!(esn.input_scale > 0.0)) throw Error("esn input scale must be positive");
  }
}

// --- ParameterSet ---

Tensor& ParameterSet::add(std::string name, MatrixXd value, bool trainable) {
  if (find(name)) throw Error("duplicate tensor '" + name + "'");
  tensors_.push_back(Tensor{std::move(name), std::move(value), trainable});
  return tensors_.back();
}

const Tensor* ParameterSet::find(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return &t;
  return nullptr;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw Error("missing tensor '" + name + "'");
  return *t;
}

Tensor& ParameterSet::at(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParameterSet*>(this)->at(name));
}

std::int64_t ParameterSet::count(bool trainable_only) const {
  std::int64_t n = 0;
  for (const auto& t : tensors_)
    if (t.trainable || !trainable_only) n += t.value.size();
  return n;
}

std::uint64_t ParameterSet::frozen_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tensors_) {
    if (t.trainable) continue;
    const std::uint64_t th = fnv1a64(t.value.data(), sizeof(double) * t.value.size());
    h = (h ^ th) * 1099511628211ULL;
  }
  return h;
}

// --- construction ---

namespace {

const char* dir_name(int d) { return d == 0 ? "fwd" : "bwd"; }

std::string layer_prefix(int layer, int d) {
  return "rnn.l" + std::to_string(layer) + "." + dir_name(d) + ".";
}

std::string esn_prefix(int d) { return std::string("esn.") + dir_name(d) + "."; }

int gate_count(ModelKind k) { return k == ModelKind::kLstm ? 4 : 3; }

MatrixXd uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = dist(rng);
  return m;
}

int layer_input_dim(const ModuleConfig& cfg, int layer) {
  return layer == 0 ? cfg.stack_input_dim() : cfg.hidden * cfg.num_directions();
}

ParameterSet build_parameters(const ModuleConfig& cfg) {
  cfg.validate();
  ParameterSet ps;
  Rng rng(cfg.init_seed);
  if (cfg.input_projection) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.input_dim));
    ps.add("proj.weight", uniform_matrix(*cfg.input_projection, cfg.input_dim, bound, rng), true);
    ps.add("proj.bias", uniform_matrix(*cfg.input_projection, 1, bound, rng), true);
  }
  if (cfg.kind == ModelKind::kGru || cfg.kind == ModelKind::kLstm) {
    const int g = gate_count(cfg.kind);
    const int h = cfg.hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(h));
    for (int l = 0; l < cfg.num_layers(); ++l) {
      const int in = layer_input_dim(cfg, l);
      for (int d = 0; d < cfg.num_directions(); ++d) {
        const std::string p = layer_prefix(l, d);
        ps.add(p + "w_input", uniform_matrix(g * h, in, bound, rng), true);
        ps.add(p + "w_hidden", uniform_matrix(g * h, h, bound, rng), true);
        ps.add(p + "b_input", uniform_matrix(g * h, 1, bound, rng), true);
        ps.add(p + "b_hidden", uniform_matrix(g * h, 1, bound, rng), true);
      }
    }
  } else if (cfg.kind == ModelKind::kEsn) {
    for (int d = 0; d < cfg.num_directions(); ++d) {
      EsnParams p = cfg.esn;
      // Shared hyperparameters, independent topology per direction.
      p.seed = cfg.esn.seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(d);
      Reservoir res = build_reservoir(cfg.hidden, cfg.input_dim, p);
      ps.add(esn_prefix(d) + "w_input", std::move(res.input), false);
      ps.add(esn_prefix(d) + "w_reservoir", std::move(res.recurrent), false);
    }
  }
  return ps;
}

}  // namespace

TemporalModule::TemporalModule(ModuleConfig cfg) : cfg_(std::move(cfg)), params_(build_parameters(cfg_)) {}

TemporalModule TemporalModule::shape_only(ModuleConfig cfg) {
  cfg.validate();
  TemporalModule m;
  m.cfg_ = cfg;
  if (cfg.kind == ModelKind::kEsn) {
    for (int d = 0; d < cfg.num_directions(); ++d) {
      m.params_.add(esn_prefix(d) + "w_input", MatrixXd::Zero(cfg.hidden, cfg.input_dim), false);
      m.params_.add(esn_prefix(d) + "w_reservoir", MatrixXd::Zero(cfg.hidden, cfg.hidden), false);
    }
  } else {
    m.params_ = build_parameters(cfg);
  }
  return m;
}

TemporalModule::TemporalModule(ModuleConfig cfg, ParameterSet params) : cfg_(std::move(cfg)) {
  // Reservoirs are not regenerated on load; the stored tensors are used as-is.
  ParameterSet expected = shape_only(cfg_).params_;
  for (auto& t : expected.tensors()) {
    const Tensor& src = params.at(t.name);
    if (src.value.rows() != t.value.rows() || src.value.cols() != t.value.cols()) {
      throw Error("tensor '" + t.name + "' has shape " + std::to_string(src.value.rows()) + "x" +
                  std::to_string(src.value.cols()) + ", config expects " +
                  std::to_string(t.value.rows()) + "x" + std::to_string(t.value.cols()));
    }
    t.value = src.value;
  }
  if (static_cast<std::size_t>(params.tensors().size()) != expected.tensors().size())
    throw Error("tensor set does not match module config");
  params_ = std::move(expected);
}

Readout::Readout(int exposed_dim, int num_classes, std::uint64_t seed) {
  if (exposed_dim < 1 || num_classes < 1) throw Error("readout dimensions must be >= 1");
  Rng rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
  const double bound = 1.0 / std::sqrt(static_cast<double>(exposed_dim));
  params_.add("readout.weight", uniform_matrix(num_classes, exposed_dim, bound, rng), true);
  params_.add("readout.bias", uniform_matrix(num_classes, 1, bound, rng), true);
}

std::int64_t count_trainable(const TemporalModule& module, const Readout& readout) {
  return module.params().count(true) + readout.params().count(true);
}

// --- reservoir ---

double spectral_radius(const MatrixXd& m) {
  if (m.rows() != m.cols()) throw Error("spectral radius needs a square matrix");
  const auto n = static_cast<lapack_int>(m.rows());
  if (n == 0) return 0.0;
  MatrixXd a = m;
  std::vector<double> re(n), im(n);
  const lapack_int info = LAPACKE_dgeev(LAPACK_COL_MAJOR, 'N', 'N', n, a.data(), n, re.data(),
                                        im.data(), nullptr, 1, nullptr, 1);
  if (info != 0) throw Error("eigenvalue computation failed (dgeev info " + std::to_string(info) + ")");
  double radius = 0.0;
  for (lapack_int i = 0; i < n; ++i) radius = std::max(radius, std::hypot(re[i], im[i]));
  return radius;
}

Reservoir build_reservoir(int size, int input_dim, const EsnParams& p) {
  if (size < 1) throw Error("reservoir size must be >= 1");
  if (input_dim < 1) throw Error("reservoir input dimension must be >= 1");
  if (!(p.density > 0.0 && p.density <= 1.0)) throw Error("reservoir density must lie in (0, 1]");
  if (!(p.spectral_radius > 0.0)) throw Error("spectral radius must be positive");
  constexpr int kMaxAttempts = 10;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng rng(p.seed + static_cast<std::uint64_t>(attempt) * 0xBF58476D1CE4E5B9ULL);
    std::bernoulli_distribution keep(p.density);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    MatrixXd w = MatrixXd::Zero(size, size);
    for (int c = 0; c < size; ++c)
      for (int r = 0; r < size; ++r)
        if (keep(rng)) w(r, c) = unit(rng);
    const double radius = spectral_radius(w);
    if (radius <= 1e-12) continue;  // empty or nilpotent draw
    Reservoir res;
    res.recurrent = w * (p.spectral_radius / radius);
    res.input.resize(size, input_dim);
    for (int c = 0; c < input_dim; ++c)
      for (int r = 0; r < size; ++r) res.input(r, c) = unit(rng) * p.input_scale;
    return res;
  }
  throw Error("reservoir generation produced a degenerate matrix " + std::to_string(kMaxAttempts) +
              " times; increase size or density");
}

// --- recurrence kernels ---

namespace {

inline ArrayXXd sigmoid(const ArrayXXd& a) { return 1.0 / (1.0 + (-a).exp()); }

struct DirParams {
  const MatrixXd* w_input = nullptr;
  const MatrixXd* w_hidden = nullptr;
  const MatrixXd* b_input = nullptr;
  const MatrixXd* b_hidden = nullptr;
};

DirParams dir_params(const ParameterSet& ps, int layer, int d) {
  const std::string p = layer_prefix(layer, d);
  return {&ps.at(p + "w_input").value, &ps.at(p + "w_hidden").value, &ps.at(p + "b_input").value,
          &ps.at(p + "b_hidden").value};
}

// Per-direction activations kept for backpropagation. Column block t holds
// the values at output position t regardless of processing order.
struct DirCache {
  MatrixXd pre_input;  // W_input x + b_input for all positions
  MatrixXd hprev, cprev;
  MatrixXd g0, g1, g2, g3;  // gru: r, u, n, hn   lstm: i, f, g, o
  MatrixXd tanh_c;
  MatrixXd out;
};

struct LayerCache {
  MatrixXd input;
  std::vector<DirCache> dirs;
  MatrixXd output;
  MatrixXd dropout_mask;
};

struct ForwardCache {
  int frames = 0;
  int batch = 0;
  MatrixXd raw;
  MatrixXd stack_input;
  std::vector<LayerCache> layers;
  MatrixXd hidden;
  MatrixXd head_mask;
  MatrixXd logits;
};

inline auto block_at(MatrixXd& m, int t, int batch) {
  return m.middleCols(static_cast<Eigen::Index>(t) * batch, batch);
}
inline auto block_at(const MatrixXd& m, int t, int batch) {
  return m.middleCols(static_cast<Eigen::Index>(t) * batch, batch);
}

void gru_cell(const DirParams& p, const MatrixXd& pre_in, const MatrixXd& hprev, MatrixXd& r,
              MatrixXd& u, MatrixXd& n, MatrixXd& hn, MatrixXd& hnew) {
  const Eigen::Index h = hprev.rows();
  MatrixXd pre_h = (*p.w_hidden) * hprev;
  pre_h.colwise() += p.b_hidden->col(0);
  r = sigmoid(pre_in.topRows(h).array() + pre_h.topRows(h).array()).matrix();
  u = sigmoid(pre_in.middleRows(h, h).array() + pre_h.middleRows(h, h).array()).matrix();
  hn = pre_h.bottomRows(h);
  n = (pre_in.bottomRows(h).array() + r.array() * hn.array()).tanh().matrix();
  hnew = ((1.0 - u.array()) * hprev.array() + u.array() * n.array()).matrix();
}

void lstm_cell(const DirParams& p, const MatrixXd& pre_in, const MatrixXd& hprev,
               const MatrixXd& cprev, MatrixXd& i, MatrixXd& f, MatrixXd& g, MatrixXd& o,
               MatrixXd& c, MatrixXd& tanh_c, MatrixXd& hnew) {
  const Eigen::Index h = hprev.rows();
  MatrixXd pre = pre_in + (*p.w_hidden) * hprev;
  pre.colwise() += p.b_hidden->col(0);
  i = sigmoid(pre.topRows(h).array()).matrix();
  f = sigmoid(pre.middleRows(h, h).array()).matrix();
  g = pre.middleRows(2 * h, h).array().tanh().matrix();
  o = sigmoid(pre.bottomRows(h).array()).matrix();
  c = (f.array() * cprev.array() + i.array() * g.array()).matrix();
  tanh_c = c.array().tanh().matrix();
  hnew = (o.array() * tanh_c.array()).matrix();
}

// Runs one direction of a gru/lstm layer over the whole sequence.
void run_gated(ModelKind kind, const DirParams& p, const MatrixXd& x, int frames, int batch,
               bool reverse, const LayerState* init, DirCache& cache) {
  const Eigen::Index h = p.w_hidden->cols();
  const Eigen::Index cols = x.cols();
  cache.pre_input.noalias() = (*p.w_input) * x;
  cache.pre_input.colwise() += p.b_input->col(0);
  cache.out.resize(h, cols);
  cache.hprev.resize(h, cols);
  cache.g0.resize(h, cols);
  cache.g1.resize(h, cols);
  cache.g2.resize(h, cols);
  cache.g3.resize(h, cols);
  const bool lstm = kind == ModelKind::kLstm;
  if (lstm) {
    cache.cprev.resize(h, cols);
    cache.tanh_c.resize(h, cols);
  }
  MatrixXd hstate = MatrixXd::Zero(h, batch);
  MatrixXd cstate = MatrixXd::Zero(h, batch);
  if (init) {
    hstate = init->h.replicate(1, batch);
    if (lstm) cstate = init->s.replicate(1, batch);
  }
  MatrixXd a, b, c, d, hnew, cnew, tc;
  for (int k = 0; k < frames; ++k) {
    const int t = reverse ? frames - 1 - k : k;
    const MatrixXd pre = block_at(cache.pre_input, t, batch);
    block_at(cache.hprev, t, batch) = hstate;
    if (lstm) {
      block_at(cache.cprev, t, batch) = cstate;
      lstm_cell(p, pre, hstate, cstate, a, b, c, d, cnew, tc, hnew);
      block_at(cache.tanh_c, t, batch) = tc;
      cstate = cnew;
    } else {
      gru_cell(p, pre, hstate, a, b, c, d, hnew);
    }
    block_at(cache.g0, t, batch) = a;
    block_at(cache.g1, t, batch) = b;
    block_at(cache.g2, t, batch) = c;
    block_at(cache.g3, t, batch) = d;
    block_at(cache.out, t, batch) = hnew;
    hstate = hnew;
  }
}

// Accumulates parameter gradients for one direction and returns d(input).
MatrixXd backprop_gated(ModelKind kind, const DirParams& p, const MatrixXd& x,
                        const DirCache& cache, const MatrixXd& dout, int frames, int batch,
                        bool reverse, MatrixXd& dw_input, MatrixXd& dw_hidden,
                        MatrixXd& db_input, MatrixXd& db_hidden) {
  const Eigen::Index h = p.w_hidden->cols();
  const Eigen::Index g = p.w_hidden->rows();
  const Eigen::Index cols = x.cols();
  const bool lstm = kind == ModelKind::kLstm;
  MatrixXd d_in(g, cols);   // d(pre-activation) through W_input
  MatrixXd d_hid(g, cols);  // d(pre-activation) through W_hidden
  MatrixXd carry_h = MatrixXd::Zero(h, batch);
  MatrixXd carry_c = MatrixXd::Zero(h, batch);
  const MatrixXd w_hidden_t = p.w_hidden->transpose();
  for (int k = frames - 1; k >= 0; --k) {
    const int t = reverse ? frames - 1 - k : k;
    const ArrayXXd dh = (block_at(dout, t, batch) + carry_h).array();
    if (lstm) {
      const ArrayXXd i = block_at(cache.g0, t, batch).array();
      const ArrayXXd f = block_at(cache.g1, t, batch).array();
      const ArrayXXd gg = block_at(cache.g2, t, batch).array();
      const ArrayXXd o = block_at(cache.g3, t, batch).array();
      const ArrayXXd tc = block_at(cache.tanh_c, t, batch).array();
      const ArrayXXd cprev = block_at(cache.cprev, t, batch).array();
      const ArrayXXd dc = carry_c.array() + dh * o * (1.0 - tc.square());
      auto da = block_at(d_in, t, batch);
      da.topRows(h) = (dc * gg * i * (1.0 - i)).matrix();
      da.middleRows(h, h) = (dc * cprev * f * (1.0 - f)).matrix();
      da.middleRows(2 * h, h) = (dc * i * (1.0 - gg.square())).matrix();
      da.bottomRows(h) = (dh * tc * o * (1.0 - o)).matrix();
      carry_c = (dc * f).matrix();
      block_at(d_hid, t, batch) = da;
      carry_h.noalias() = w_hidden_t * da;
    } else {
      const ArrayXXd r = block_at(cache.g0, t, batch).array();
      const ArrayXXd u = block_at(cache.g1, t, batch).array();
      const ArrayXXd n = block_at(cache.g2, t, batch).array();
      const ArrayXXd hn = block_at(cache.g3, t, batch).array();
      const ArrayXXd hprev = block_at(cache.hprev, t, batch).array();
      const ArrayXXd dan = dh * u * (1.0 - n.square());
      const ArrayXXd dar = dan * hn * r * (1.0 - r);
      const ArrayXXd dau = dh * (n - hprev) * u * (1.0 - u);
      auto di = block_at(d_in, t, batch);
      auto dhh = block_at(d_hid, t, batch);
      di.topRows(h) = dar.matrix();
      di.middleRows(h, h) = dau.matrix();
      di.bottomRows(h) = dan.matrix();
      dhh.topRows(h) = dar.matrix();
      dhh.middleRows(h, h) = dau.matrix();
      dhh.bottomRows(h) = (dan * r).matrix();
      carry_h = (dh * (1.0 - u)).matrix();
      carry_h.noalias() += w_hidden_t * dhh;
    }
  }
  dw_input.noalias() += d_in * x.transpose();
  db_input += d_in.rowwise().sum();
  dw_hidden.noalias() += d_hid * cache.hprev.transpose();
  db_hidden += d_hid.rowwise().sum();
  return p.w_input->transpose() * d_in;
}

void run_esn(const MatrixXd& w_input, const MatrixXd& w_res, double leak, const MatrixXd& x,
             int frames, int batch, bool reverse, const LayerState* init, MatrixXd& out) {
  const Eigen::Index n = w_res.rows();
  const MatrixXd drive = w_input * x;
  out.resize(n, x.cols());
  MatrixXd s = init ? MatrixXd(init->s.replicate(1, batch)) : MatrixXd::Zero(n, batch);
  for (int k = 0; k < frames; ++k) {
    const int t = reverse ? frames - 1 - k : k;
    const MatrixXd cand = (block_at(drive, t, batch) + w_res * s).array().tanh().matrix();
    s = (1.0 - leak) * s + leak * cand;
    block_at(out, t, batch) = s;
  }
}

MatrixXd pack_batch(const std::vector<const FeatureMatrix*>& batch, int expected_dim) {
  if (batch.empty()) throw Error("empty batch");
  const int frames = static_cast<int>(batch.front()->rows());
  const int b = static_cast<int>(batch.size());
  if (frames < 1) throw Error("feature sequence has no frames");
  MatrixXd x(expected_dim, static_cast<Eigen::Index>(frames) * b);
  for (int j = 0; j < b; ++j) {
    const FeatureMatrix& f = *batch[j];
    if (f.rows() != frames) throw Error("all clips in a batch must have the same number of frames");
    if (f.cols() != expected_dim) {
      throw Error("feature dimension " + std::to_string(f.cols()) + " does not match module input " +
                  std::to_string(expected_dim));
    }
    if (!f.allFinite()) throw Error("non-finite value in input features");
    for (int t = 0; t < frames; ++t)
      x.col(static_cast<Eigen::Index>(t) * b + j) = f.row(t).transpose().cast<double>();
  }
  return x;
}

MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = keep(rng) ? scale : 0.0;
  return m;
}

bool uses_dropout(const ModuleConfig& cfg, bool train_mode) {
  return train_mode && cfg.dropout > 0.0 &&
         (cfg.kind == ModelKind::kGru || cfg.kind == ModelKind::kLstm);
}

// Full forward pass over a packed batch up to the readout logits.
void run_forward(const TemporalModule& module, const Readout* readout, MatrixXd raw, int frames,
                 int batch, bool train_mode, Rng* rng, const ModuleState* init,
                 ForwardCache& cache) {
  const ModuleConfig& cfg = module.config();
  const ParameterSet& ps = module.params();
  const bool dropout = uses_dropout(cfg, train_mode);
  if (dropout && !rng) throw Error("train-mode dropout requires an RNG");
  cache.frames = frames;
  cache.batch = batch;
  cache.raw = std::move(raw);
  if (cfg.input_projection) {
    cache.stack_input.noalias() = ps.at("proj.weight").value * cache.raw;
    cache.stack_input.colwise() += ps.at("proj.bias").value.col(0);
  } else {
    cache.stack_input = cache.raw;
  }
  const MatrixXd* current = &cache.stack_input;
  cache.layers.clear();
  cache.layers.resize(cfg.num_layers());
  const int dirs = cfg.num_directions();
  for (int l = 0; l < cfg.num_layers(); ++l) {
    LayerCache& lc = cache.layers[l];
    lc.input = *current;
    lc.dirs.resize(dirs);
    const LayerState* layer_init = init ? &(*init)[l] : nullptr;
    for (int d = 0; d < dirs; ++d) {
      const bool reverse = d == 1;
      const LayerState* dinit = reverse ? nullptr : layer_init;
      if (cfg.kind == ModelKind::kEsn) {
        run_esn(ps.at(esn_prefix(d) + "w_input").value, ps.at(esn_prefix(d) + "w_reservoir").value,
                cfg.esn.leak, lc.input, frames, batch, reverse, dinit, lc.dirs[d].out);
      } else {
        run_gated(cfg.kind, dir_params(ps, l, d), lc.input, frames, batch, reverse, dinit,
                  lc.dirs[d]);
      }
    }
    if (dirs == 1) {
      lc.output = lc.dirs[0].out;
    } else {
      lc.output.resize(2 * cfg.hidden, lc.input.cols());
      lc.output.topRows(cfg.hidden) = lc.dirs[0].out;
      lc.output.bottomRows(cfg.hidden) = lc.dirs[1].out;
    }
    const bool last = l + 1 == cfg.num_layers();
    if (dropout && !last) {
      lc.dropout_mask = dropout_mask(lc.output.rows(), lc.output.cols(), cfg.dropout, *rng);
      lc.output = lc.output.cwiseProduct(lc.dropout_mask);
    }
    current = &lc.output;
  }
  cache.hidden = *current;
  if (dropout) {
    cache.head_mask = dropout_mask(cache.hidden.rows(), cache.hidden.cols(), cfg.dropout, *rng);
    cache.hidden = cache.hidden.cwiseProduct(cache.head_mask);
  }
  if (readout) {
    if (readout->input_dim() != cache.hidden.rows()) {
      throw Error("readout expects " + std::to_string(readout->input_dim()) +
                  "-dim states, module exposes " + std::to_string(cache.hidden.rows()));
    }
    cache.logits.noalias() = readout->params().at("readout.weight").value * cache.hidden;
    cache.logits.colwise() += readout->params().at("readout.bias").value.col(0);
  }
}

double clamp_posterior(double p) { return std::clamp(p, 1e-15, 1.0 - 1e-15); }

std::vector<MatrixXd> unpack_posteriors(const MatrixXd& logits, int frames, int batch) {
  std::vector<MatrixXd> out(batch, MatrixXd(frames, logits.rows()));
  for (int t = 0; t < frames; ++t)
    for (int j = 0; j < batch; ++j)
      for (Eigen::Index c = 0; c < logits.rows(); ++c) {
        const double a = logits(c, static_cast<Eigen::Index>(t) * batch + j);
        out[j](t, c) = clamp_posterior(1.0 / (1.0 + std::exp(-a)));
      }
  return out;
}

// BCE from logits; returns (mean loss, d loss / d logits).
std::pair<double, MatrixXd> bce_from_logits(const MatrixXd& logits,
                                            const std::vector<const ActivityMatrix*>& targets,
                                            int frames, int batch) {
  if (static_cast<int>(targets.size()) != batch) throw Error("targets/batch size mismatch");
  const Eigen::Index classes = logits.rows();
  for (const auto* tgt : targets) {
    if (tgt->rows() != frames || tgt->cols() != classes) {
      throw Error("target shape " + std::to_string(tgt->rows()) + "x" + std::to_string(tgt->cols()) +
                  " does not match posteriors " + std::to_string(frames) + "x" +
                  std::to_string(classes));
    }
  }
  const double norm = 1.0 / (static_cast<double>(frames) * batch * classes);
  MatrixXd grad(classes, logits.cols());
  double loss = 0.0;
  for (int t = 0; t < frames; ++t)
    for (int j = 0; j < batch; ++j) {
      const Eigen::Index col = static_cast<Eigen::Index>(t) * batch + j;
      for (Eigen::Index c = 0; c < classes; ++c) {
        const double a = logits(c, col);
        const double y = (*targets[j])(t, c) ? 1.0 : 0.0;
        loss += std::max(a, 0.0) - a * y + std::log1p(std::exp(-std::abs(a)));
        grad(c, col) = (1.0 / (1.0 + std::exp(-a)) - y) * norm;
      }
    }
  return {loss * norm, grad};
}

void add_grad(Gradients& g, const std::string& name, const MatrixXd& value) {
  auto it = g.find(name);
  if (it == g.end()) g.emplace(name, value);
  else it->second += value;
}

}  // namespace

// --- public sequence API ---

bool readout_only(const TemporalModule& module) { return module.params().count(true) == 0; }

ModuleState initial_state(const TemporalModule& module) {
  const ModuleConfig& cfg = module.config();
  ModuleState st(cfg.num_layers());
  for (auto& ls : st) {
    ls.s = VectorXd::Zero(cfg.hidden);
    ls.h = VectorXd::Zero(cfg.hidden);
  }
  return st;
}

StepResult step(const TemporalModule& module, const ModuleState& state, const VectorXd& z_t) {
  const ModuleConfig& cfg = module.config();
  const ParameterSet& ps = module.params();
  if (cfg.bidirectional()) throw Error("step() is defined for unidirectional modules only");
  if (z_t.size() != cfg.input_dim) {
    throw Error("step input has dimension " + std::to_string(z_t.size()) + ", module expects " +
                std::to_string(cfg.input_dim));
  }
  if (static_cast<int>(state.size()) != cfg.num_layers()) throw Error("state/layer count mismatch");
  StepResult res;
  MatrixXd x = z_t;
  if (cfg.input_projection) x = ps.at("proj.weight").value * x + ps.at("proj.bias").value;
  if (cfg.kind == ModelKind::kLinear) {
    GateValues gv{VectorXd::Zero(x.rows()), VectorXd::Ones(x.rows()), VectorXd::Ones(x.rows())};
    res.gates.push_back(gv);
    res.h = x.col(0);
    return res;
  }
  for (int l = 0; l < cfg.num_layers(); ++l) {
    const LayerState& prev = state[l];
    if (prev.h.size() != cfg.hidden || prev.s.size() != cfg.hidden)
      throw Error("state dimension does not match hidden size");
    LayerState next;
    GateValues gv;
    const Eigen::Index h = cfg.hidden;
    if (cfg.kind == ModelKind::kEsn) {
      const MatrixXd& w_in = ps.at(esn_prefix(0) + "w_input").value;
      const MatrixXd& w = ps.at(esn_prefix(0) + "w_reservoir").value;
      const VectorXd cand = (w_in * x.col(0) + w * prev.h).array().tanh().matrix();
      next.s = (1.0 - cfg.esn.leak) * prev.s + cfg.esn.leak * cand;
      next.h = next.s;
      gv = {VectorXd::Constant(h, 1.0 - cfg.esn.leak), VectorXd::Constant(h, cfg.esn.leak),
            VectorXd::Ones(h)};
    } else {
      const DirParams p = dir_params(ps, l, 0);
      MatrixXd pre = (*p.w_input) * x + *p.b_input;
      MatrixXd a, b, c, d, hnew;
      if (cfg.kind == ModelKind::kGru) {
        gru_cell(p, pre, prev.h, a, b, c, d, hnew);
        next.s = hnew.col(0);
        next.h = next.s;
        gv = {(1.0 - b.array()).matrix(), b, VectorXd::Ones(h)};
      } else {
        MatrixXd cnew, tc;
        lstm_cell(p, pre, prev.h, prev.s, a, b, c, d, cnew, tc, hnew);
        next.s = cnew.col(0);
        next.h = hnew.col(0);
        gv = {b, a, d};
      }
    }
    res.gates.push_back(std::move(gv));
    x = next.h;
    res.state.push_back(std::move(next));
  }
  res.h = x.col(0);
  return res;
}

MatrixXd hidden_states(const TemporalModule& module, const FeatureMatrix& features,
                       const ModuleState* init) {
  if (init && module.config().bidirectional())
    throw Error("initial states are supported for unidirectional modules only");
  ForwardCache cache;
  const int frames = static_cast<int>(features.rows());
  run_forward(module, nullptr, pack_batch({&features}, module.config().input_dim), frames, 1,
              false, nullptr, init, cache);
  return cache.hidden.transpose();
}

std::vector<MatrixXd> hidden_states_batch(const TemporalModule& module,
                                          const std::vector<const FeatureMatrix*>& batch) {
  ForwardCache cache;
  const int frames = static_cast<int>(batch.front()->rows());
  const int b = static_cast<int>(batch.size());
  run_forward(module, nullptr, pack_batch(batch, module.config().input_dim), frames, b, false,
              nullptr, nullptr, cache);
  std::vector<MatrixXd> out(b, MatrixXd(frames, cache.hidden.rows()));
  for (int t = 0; t < frames; ++t)
    for (int j = 0; j < b; ++j) out[j].row(t) = cache.hidden.col(static_cast<Eigen::Index>(t) * b + j).transpose();
  return out;
}

std::vector<MatrixXd> forward_batch(const TemporalModule& module, const Readout& readout,
                                    const std::vector<const FeatureMatrix*>& batch,
                                    bool train_mode, Rng* rng) {
  ForwardCache cache;
  const int frames = static_cast<int>(batch.front()->rows());
  const int b = static_cast<int>(batch.size());
  run_forward(module, &readout, pack_batch(batch, module.config().input_dim), frames, b,
              train_mode, rng, nullptr, cache);
  return unpack_posteriors(cache.logits, frames, b);
}

MatrixXd forward(const TemporalModule& module, const Readout& readout,
                 const FeatureSequence& features, bool train_mode, Rng* rng) {
  features.validate();
  return forward_batch(module, readout, {&features.frames}, train_mode, rng).front();
}

LossAndGradients backward(const TemporalModule& module, const Readout& readout,
                          const std::vector<const FeatureMatrix*>& batch,
                          const std::vector<const ActivityMatrix*>& targets, bool train_mode,
                          Rng* rng) {
  const ModuleConfig& cfg = module.config();
  const ParameterSet& ps = module.params();
  ForwardCache cache;
  const int frames = static_cast<int>(batch.front()->rows());
  const int b = static_cast<int>(batch.size());
  run_forward(module, &readout, pack_batch(batch, cfg.input_dim), frames, b, train_mode, rng,
              nullptr, cache);
  auto [loss, dlogits] = bce_from_logits(cache.logits, targets, frames, b);

  LossAndGradients out;
  out.loss = loss;
  const MatrixXd& w_o = readout.params().at("readout.weight").value;
  add_grad(out.grads, "readout.weight", dlogits * cache.hidden.transpose());
  add_grad(out.grads, "readout.bias", dlogits.rowwise().sum());
  if (readout_only(module)) return out;

  MatrixXd dhidden = w_o.transpose() * dlogits;
  if (cache.head_mask.size()) dhidden = dhidden.cwiseProduct(cache.head_mask);

  MatrixXd dstack;
  if (cfg.num_layers() == 0) {
    dstack = std::move(dhidden);
  } else {
    MatrixXd dout = std::move(dhidden);
    for (int l = cfg.num_layers() - 1; l >= 0; --l) {
      LayerCache& lc = cache.layers[l];
      if (lc.dropout_mask.size()) dout = dout.cwiseProduct(lc.dropout_mask);
      MatrixXd dinput = MatrixXd::Zero(lc.input.rows(), lc.input.cols());
      for (int d = 0; d < cfg.num_directions(); ++d) {
        const DirParams p = dir_params(ps, l, d);
        const std::string prefix = layer_prefix(l, d);
        MatrixXd dwi = MatrixXd::Zero(p.w_input->rows(), p.w_input->cols());
        MatrixXd dwh = MatrixXd::Zero(p.w_hidden->rows(), p.w_hidden->cols());
        MatrixXd dbi = MatrixXd::Zero(p.b_input->rows(), 1);
        MatrixXd dbh = MatrixXd::Zero(p.b_hidden->rows(), 1);
        const MatrixXd ddir = cfg.num_directions() == 1
                                  ? dout
                                  : MatrixXd(dout.middleRows(d * cfg.hidden, cfg.hidden));
        dinput += backprop_gated(cfg.kind, p, lc.input, lc.dirs[d], ddir, frames, b, d == 1, dwi,
                                 dwh, dbi, dbh);
        add_grad(out.grads, prefix + "w_input", dwi);
        add_grad(out.grads, prefix + "w_hidden", dwh);
        add_grad(out.grads, prefix + "b_input", dbi);
        add_grad(out.grads, prefix + "b_hidden", dbh);
      }
      dout = std::move(dinput);
    }
    dstack = std::move(dout);
  }
  if (cfg.input_projection) {
    add_grad(out.grads, "proj.weight", dstack * cache.raw.transpose());
    add_grad(out.grads, "proj.bias", dstack.rowwise().sum());
  }
  return out;
}

LossAndGradients backward(const TemporalModule& module, const Readout& readout,
                          const FeatureSequence& features, const FrameActivity& targets) {
  features.validate();
  if (targets.num_frames() != features.num_frames())
    throw Error("targets and features are on different frame grids");
  return backward(module, readout, {&features.frames}, {&targets.activity});
}

namespace {
MatrixXd pack_hidden(const std::vector<const MatrixXd*>& hidden, Eigen::Index dim) {
  const int frames = static_cast<int>(hidden.front()->rows());
  const int b = static_cast<int>(hidden.size());
  MatrixXd x(dim, static_cast<Eigen::Index>(frames) * b);
  for (int j = 0; j < b; ++j) {
    if (hidden[j]->rows() != frames || hidden[j]->cols() != dim)
      throw Error("cached hidden states have inconsistent shape");
    for (int t = 0; t < frames; ++t) x.col(static_cast<Eigen::Index>(t) * b + j) = hidden[j]->row(t).transpose();
  }
  return x;
}
}  // namespace

std::vector<MatrixXd> readout_forward(const Readout& readout,
                                      const std::vector<const MatrixXd*>& hidden) {
  if (hidden.empty()) throw Error("empty batch");
  const MatrixXd x = pack_hidden(hidden, readout.input_dim());
  MatrixXd logits = readout.params().at("readout.weight").value * x;
  logits.colwise() += readout.params().at("readout.bias").value.col(0);
  return unpack_posteriors(logits, static_cast<int>(hidden.front()->rows()),
                           static_cast<int>(hidden.size()));
}

LossAndGradients readout_backward(const Readout& readout,
                                  const std::vector<const MatrixXd*>& hidden,
                                  const std::vector<const ActivityMatrix*>& targets) {
  if (hidden.empty()) throw Error("empty batch");
  const int frames = static_cast<int>(hidden.front()->rows());
  const int b = static_cast<int>(hidden.size());
  const MatrixXd x = pack_hidden(hidden, readout.input_dim());
  MatrixXd logits = readout.params().at("readout.weight").value * x;
  logits.colwise() += readout.params().at("readout.bias").value.col(0);
  auto [loss, dlogits] = bce_from_logits(logits, targets, frames, b);
  LossAndGradients out;
  out.loss = loss;
  out.grads.emplace("readout.weight", dlogits * x.transpose());
  out.grads.emplace("readout.bias", dlogits.rowwise().sum());
  return out;
}

void swap_directions(TemporalModule& module, Readout& readout) {
  const ModuleConfig& cfg = module.config();
  if (!cfg.bidirectional()) throw Error("swap_directions needs a bidirectional module");
  ParameterSet& ps = module.params();
  const int h = cfg.hidden;
  auto swap_halves = [h](MatrixXd& m) {
    MatrixXd left = m.leftCols(h);
    m.leftCols(h) = m.rightCols(h);
    m.rightCols(h) = left;
  };
  for (int l = 0; l < cfg.num_layers(); ++l) {
    const std::vector<std::string> names =
        cfg.kind == ModelKind::kEsn ? std::vector<std::string>{"w_input", "w_reservoir"}
                                    : std::vector<std::string>{"w_input", "w_hidden", "b_input", "b_hidden"};
    for (const auto& n : names) {
      const std::string a = cfg.kind == ModelKind::kEsn ? esn_prefix(0) + n : layer_prefix(l, 0) + n;
      const std::string b = cfg.kind == ModelKind::kEsn ? esn_prefix(1) + n : layer_prefix(l, 1) + n;
      std::swap(ps.at(a).value, ps.at(b).value);
    }
    // Upper layers read [fwd; bwd] of the layer below, whose halves swapped.
    if (l > 0) {
      swap_halves(ps.at(layer_prefix(l, 0) + "w_input").value);
      swap_halves(ps.at(layer_prefix(l, 1) + "w_input").value);
    }
  }
  swap_halves(readout.params().at("readout.weight").value);
}

}  // namespace tsed
