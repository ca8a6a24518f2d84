#include "tsed/trainer.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace tsed {

using Eigen::MatrixXd;

// ---------------------------------------------------------------- datasets

void Dataset::add(ClipAnnotation clip, FeatureMatrix feats) {
  clip.validate();
  const FrameGrid grid = FrameGrid::for_duration(clip.duration);
  if (feats.rows() != grid.num_frames) {
    throw Error("clip '" + clip.clip_id + "' has " + std::to_string(feats.rows()) +
                " feature frames, its duration implies " + std::to_string(grid.num_frames));
  }
  if (!features.empty() && feats.cols() != features.front().cols())
    throw Error("clip '" + clip.clip_id + "' has a different feature dimension");
  targets.push_back(rasterize(clip, grid, classes).activity);
  clips.push_back(std::move(clip));
  features.push_back(std::move(feats));
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  Dataset out;
  out.classes = classes;
  for (std::size_t i : idx) {
    out.clips.push_back(clips.at(i));
    out.features.push_back(features.at(i));
    out.targets.push_back(targets.at(i));
  }
  return out;
}

Dataset load_split(const std::filesystem::path& root, const std::string& split,
                   const std::vector<std::string>& classes, const FrontendConfig& frontend,
                   FeatureKind kind) {
  namespace fs = std::filesystem;
  const fs::path dir = root / split;
  const fs::path audio = dir / "audio";
  if (!fs::is_directory(audio)) throw Error("missing audio directory " + audio.string());
  std::vector<fs::path> wavs;
  for (const auto& e : fs::directory_iterator(audio))
    if (e.path().extension() == ".wav") wavs.push_back(e.path());
  std::sort(wavs.begin(), wavs.end());
  if (wavs.empty()) throw Error("no wav files in " + audio.string());

  std::map<std::string, double> durations;
  std::vector<Waveform> waves;
  for (const auto& w : wavs) {
    waves.push_back(load_wav(w));
    durations[w.filename().string()] =
        static_cast<double>(waves.back().samples.size()) / waves.back().sample_rate;
  }
  const fs::path labels = dir / "labels.tsv";
  std::map<std::string, ClipAnnotation> by_id;
  for (auto& c : read_strong_tsv(labels, &durations)) {
    if (!durations.count(c.clip_id))
      throw Error(labels.string() + ": clip '" + c.clip_id + "' has no audio file");
    by_id[c.clip_id] = std::move(c);
  }

  Dataset ds;
  ds.classes = classes;
  for (std::size_t i = 0; i < wavs.size(); ++i) {
    const std::string id = wavs[i].filename().string();
    ClipAnnotation ann = by_id.at(id);
    const int frames = FrameGrid::for_duration(ann.duration).num_frames;
    FeatureSequence f;
    if (kind == FeatureKind::kEmbeddings) {
      f = read_embeddings(dir / "embeddings" / (wavs[i].stem().string() + ".emb"));
      if (f.num_frames() != frames)
        throw Error("embedding for '" + id + "' has " + std::to_string(f.num_frames()) +
                    " frames, expected " + std::to_string(frames));
    } else {
      if (waves[i].sample_rate != frontend.sample_rate)
        throw Error("'" + id + "' is sampled at " + std::to_string(waves[i].sample_rate) +
                    " Hz, the frontend expects " + std::to_string(frontend.sample_rate));
      f = extract_features(waves[i], frontend, frames);
    }
    ds.add(std::move(ann), std::move(f.frames));
  }
  return ds;
}

// --------------------------------------------------------------- normalizer

Normalizer Normalizer::fit(const std::vector<FeatureMatrix>& feats) {
  if (feats.empty()) throw Error("cannot fit a normalizer on no data");
  const Eigen::Index d = feats.front().cols();
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(d), sq = Eigen::RowVectorXd::Zero(d);
  double n = 0.0;
  for (const auto& f : feats) {
    const Eigen::MatrixXd x = f.cast<double>();
    sum += x.colwise().sum();
    sq += x.array().square().matrix().colwise().sum();
    n += static_cast<double>(x.rows());
  }
  Normalizer out;
  const Eigen::RowVectorXd mean = sum / n;
  const Eigen::RowVectorXd var = (sq / n - mean.array().square().matrix()).cwiseMax(0.0);
  out.mean = mean.cast<float>();
  out.inv_std.resize(d);
  for (Eigen::Index j = 0; j < d; ++j)
    out.inv_std(j) = var(j) > 1e-12 ? static_cast<float>(1.0 / std::sqrt(var(j))) : 1.0f;
  return out;
}

Normalizer Normalizer::identity(int dim) {
  Normalizer n;
  n.mean = Eigen::RowVectorXf::Zero(dim);
  n.inv_std = Eigen::RowVectorXf::Ones(dim);
  return n;
}

FeatureMatrix Normalizer::apply(const FeatureMatrix& f) const {
  if (f.cols() != mean.size()) throw Error("feature dimension does not match the normalizer");
  FeatureMatrix out = f;
  out.rowwise() -= mean;
  out.array().rowwise() *= inv_std.array();
  return out;
}

// ------------------------------------------------------------------- model

Model::Model(const ModuleConfig& cfg, std::vector<std::string> cls, Normalizer norm,
             std::uint64_t readout_seed)
    : module(cfg),
      readout(cfg.exposed_dim(), static_cast<int>(cls.size()), readout_seed),
      classes(std::move(cls)),
      normalizer(std::move(norm)) {
  if (normalizer.mean.size() != cfg.input_dim) throw Error("normalizer dimension does not match the module input");
}

namespace {

constexpr int kEvalChunk = 64;

// Runs `fn` over chunks of clips sharing a frame count; indices refer to `feats`.
template <typename Fn>
void for_each_chunk(const std::vector<const FeatureMatrix*>& feats, Fn fn) {
  std::map<Eigen::Index, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < feats.size(); ++i) by_len[feats[i]->rows()].push_back(i);
  for (const auto& [len, idx] : by_len) {
    for (std::size_t a = 0; a < idx.size(); a += kEvalChunk) {
      const std::vector<std::size_t> part(idx.begin() + a,
                                          idx.begin() + std::min(idx.size(), a + kEvalChunk));
      std::vector<const FeatureMatrix*> batch;
      for (std::size_t i : part) batch.push_back(feats[i]);
      fn(part, batch);
    }
  }
}

std::vector<MatrixXd> predict_normalized(const Model& model, const std::vector<const FeatureMatrix*>& feats) {
  std::vector<MatrixXd> out(feats.size());
  for_each_chunk(feats, [&](const std::vector<std::size_t>& idx, const std::vector<const FeatureMatrix*>& batch) {
    auto post = forward_batch(model.module, model.readout, batch);
    for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] = std::move(post[k]);
  });
  return out;
}

std::vector<FeatureMatrix> normalize_all(const Model& model, const std::vector<FeatureMatrix>& feats) {
  std::vector<FeatureMatrix> out;
  out.reserve(feats.size());
  for (const auto& f : feats) out.push_back(model.normalizer.apply(f));
  return out;
}

std::vector<const FeatureMatrix*> pointers(const std::vector<FeatureMatrix>& v) {
  std::vector<const FeatureMatrix*> out;
  for (const auto& f : v) out.push_back(&f);
  return out;
}

double bce(const std::vector<MatrixXd>& post, const std::vector<ActivityMatrix>& targets) {
  double sum = 0.0, n = 0.0;
  for (std::size_t i = 0; i < post.size(); ++i) {
    const auto p = post[i].array();
    const auto y = targets[i].cast<double>().array();
    sum -= (y * p.log() + (1.0 - y) * (1.0 - p).log()).sum();
    n += static_cast<double>(p.size());
  }
  return sum / n;
}

}  // namespace

std::vector<MatrixXd> predict(const Model& model, const std::vector<FeatureMatrix>& feats) {
  const auto norm = normalize_all(model, feats);
  return predict_normalized(model, pointers(norm));
}

double dataset_loss(const Model& model, const Dataset& data) {
  return bce(predict(model, data.features), data.targets);
}

double selection_psds1(const Model& model, const Dataset& val, const PsdsConfig& cfg) {
  return psds(val.clips, predict(model, val.features), model.classes, 1, cfg).psds;
}

// ------------------------------------------------------------ configuration

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
  if (batch_size < 1) throw Error("batch size must be >= 1");
  if (max_epochs < 1) throw Error("max_epochs must be >= 1");
  if (early_stop_patience < 1) throw Error("early_stop_patience must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw Error("adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw Error("adam eps must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},       {"early_stop_patience", c.early_stop_patience},
          {"seed", c.seed},                   {"beta1", c.beta1},
          {"beta2", c.beta2},                 {"eps", c.eps}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.seed = j.value("seed", c.seed);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.validate();
  return c;
}

nlohmann::json to_json(const ModuleConfig& c) {
  nlohmann::json j = {{"kind", to_string(c.kind)},
                      {"direction", to_string(c.direction)},
                      {"input_dim", c.input_dim},
                      {"hidden", c.hidden},
                      {"layers", c.layers},
                      {"dropout", c.dropout},
                      {"init_seed", c.init_seed},
                      {"esn",
                       {{"spectral_radius", c.esn.spectral_radius},
                        {"leak", c.esn.leak},
                        {"input_scale", c.esn.input_scale},
                        {"density", c.esn.density},
                        {"seed", c.esn.seed}}}};
  j["input_projection"] = c.input_projection ? nlohmann::json(*c.input_projection) : nlohmann::json(nullptr);
  return j;
}

ModuleConfig module_config_from_json(const nlohmann::json& j) {
  ModuleConfig c;
  c.kind = parse_model_kind(j.at("kind").get<std::string>());
  const std::string dir = j.value("direction", std::string("uni"));
  if (dir != "uni" && dir != "bi") throw Error("direction must be uni or bi, got '" + dir + "'");
  c.direction = dir == "bi" ? Direction::kBi : Direction::kUni;
  c.input_dim = j.at("input_dim").get<int>();
  c.hidden = j.value("hidden", c.hidden);
  c.layers = j.value("layers", c.layers);
  c.dropout = j.value("dropout", c.dropout);
  c.init_seed = j.value("init_seed", c.init_seed);
  if (j.contains("input_projection") && !j["input_projection"].is_null())
    c.input_projection = j["input_projection"].get<int>();
  if (j.contains("esn")) {
    const auto& e = j["esn"];
    c.esn.spectral_radius = e.value("spectral_radius", c.esn.spectral_radius);
    c.esn.leak = e.value("leak", c.esn.leak);
    c.esn.input_scale = e.value("input_scale", c.esn.input_scale);
    c.esn.density = e.value("density", c.esn.density);
    c.esn.seed = e.value("seed", c.esn.seed);
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const FrontendConfig& c) {
  nlohmann::json j = {{"sample_rate", c.sample_rate}, {"n_fft", c.n_fft}, {"hop", c.hop},
                      {"n_mels", c.n_mels},           {"seed", c.seed}};
  j["projection_dim"] = c.projection_dim ? nlohmann::json(*c.projection_dim) : nlohmann::json(nullptr);
  return j;
}

FrontendConfig frontend_config_from_json(const nlohmann::json& j) {
  FrontendConfig c;
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.n_fft = j.value("n_fft", c.n_fft);
  c.hop = j.value("hop", c.hop);
  c.n_mels = j.value("n_mels", c.n_mels);
  c.seed = j.value("seed", c.seed);
  if (j.contains("projection_dim") && !j["projection_dim"].is_null())
    c.projection_dim = j["projection_dim"].get<int>();
  return c;
}

// -------------------------------------------------------------------- adam

void adam_step(const std::vector<ParameterSet*>& params, const Gradients& grads,
               AdamState& state, const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    if (!g.allFinite()) throw Error("non-finite gradient in tensor '" + name + "'");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (ParameterSet* ps : params) {
    for (Tensor& t : ps->tensors()) {
      if (!t.trainable) continue;
      auto it = grads.find(t.name);
      if (it == grads.end()) continue;
      const MatrixXd& g = it->second;
      if (g.rows() != t.value.rows() || g.cols() != t.value.cols())
        throw Error("gradient shape mismatch for tensor '" + t.name + "'");
      auto& m = state.m[t.name];
      auto& v = state.v[t.name];
      if (m.size() == 0) {
        m = MatrixXd::Zero(g.rows(), g.cols());
        v = MatrixXd::Zero(g.rows(), g.cols());
      }
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
      t.value.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
    }
  }
}

// ------------------------------------------------------------- checkpoints

namespace {

constexpr char kCkptMagic[8] = {'T', 'S', 'E', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;

std::string feature_kind_name(FeatureKind k) { return k == FeatureKind::kEmbeddings ? "embeddings" : "logmel"; }

FeatureKind parse_feature_kind(const std::string& s) {
  if (s == "logmel") return FeatureKind::kLogMel;
  if (s == "embeddings") return FeatureKind::kEmbeddings;
  throw Error("unknown feature kind '" + s + "'");
}

nlohmann::json model_json(const Model& model) {
  return {{"module", to_json(model.module.config())},
          {"classes", model.classes},
          {"frontend", to_json(model.frontend)},
          {"features", feature_kind_name(model.feature_kind)}};
}

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void tensor(const std::string& name, const MatrixXd& m, bool trainable) {
    pod(static_cast<std::uint32_t>(name.size()));
    bytes(name.data(), name.size());
    pod(kDtypeF64);
    pod(static_cast<std::uint8_t>(trainable ? 1 : 0));
    pod(static_cast<std::uint32_t>(m.rows()));
    pod(static_cast<std::uint32_t>(m.cols()));
    bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::size_t end, std::string path)
      : buf_(buf), end_(end), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const char* take(std::size_t n) {
    if (pos_ + n > end_) throw Error(path_ + ": truncated checkpoint");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string path_;
};

}  // namespace

std::uint64_t config_hash(const Model& model, const TrainConfig& train) {
  nlohmann::json j = model_json(model);
  j["train"] = to_json(train);
  const std::string s = j.dump();
  return fnv1a64(s.data(), s.size());
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header = model_json(ckpt.model);
  header["train"] = to_json(ckpt.train);
  header["epoch"] = ckpt.epoch;
  header["val_psds1"] = ckpt.val_psds1;
  header["config_hash"] = ckpt.config_hash;
  header["adam_step"] = ckpt.optimizer.step;
  const std::string js = header.dump();

  Writer w;
  w.bytes(kCkptMagic, 8);
  w.pod(kCkptVersion);
  w.pod(static_cast<std::uint64_t>(js.size()));
  w.bytes(js.data(), js.size());
  std::vector<std::pair<std::string, std::pair<const MatrixXd*, bool>>> tensors;
  for (const auto& t : ckpt.model.module.params().tensors()) tensors.push_back({t.name, {&t.value, t.trainable}});
  for (const auto& t : ckpt.model.readout.params().tensors()) tensors.push_back({t.name, {&t.value, t.trainable}});
  const MatrixXd mean = ckpt.model.normalizer.mean.cast<double>();
  const MatrixXd inv = ckpt.model.normalizer.inv_std.cast<double>();
  tensors.push_back({"norm.mean", {&mean, false}});
  tensors.push_back({"norm.inv_std", {&inv, false}});
  for (const auto& [name, m] : ckpt.optimizer.m) tensors.push_back({"adam.m." + name, {&m, false}});
  for (const auto& [name, v] : ckpt.optimizer.v) tensors.push_back({"adam.v." + name, {&v, false}});
  w.pod(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) w.tensor(name, *t.first, t.second);
  const std::uint64_t crc = crc64(w.buffer().data(), w.buffer().size());
  w.pod(crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string p = path.string();
  if (buf.size() < 8 + 4 + 8 + 8) throw Error(p + ": truncated checkpoint");
  if (std::memcmp(buf.data(), kCkptMagic, 8) != 0) throw Error(p + ": bad magic, not a checkpoint");
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (crc64(buf.data(), buf.size() - 8) != stored) throw Error(p + ": CRC mismatch");

  Reader r(buf, buf.size() - 8, p);
  r.take(8);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCkptVersion) throw Error(p + ": unsupported checkpoint version " + std::to_string(version));
  const auto jlen = r.pod<std::uint64_t>();
  const char* js = r.take(jlen);
  const nlohmann::json header = nlohmann::json::parse(js, js + jlen);

  std::map<std::string, Tensor> tensors;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto nlen = r.pod<std::uint32_t>();
    std::string name(r.take(nlen), nlen);
    if (r.pod<std::uint8_t>() != kDtypeF64) throw Error(p + ": unsupported dtype for tensor '" + name + "'");
    const bool trainable = r.pod<std::uint8_t>() != 0;
    const auto rows = r.pod<std::uint32_t>();
    const auto cols = r.pod<std::uint32_t>();
    MatrixXd m(rows, cols);
    std::memcpy(m.data(), r.take(static_cast<std::size_t>(rows) * cols * sizeof(double)),
                static_cast<std::size_t>(rows) * cols * sizeof(double));
    tensors[name] = Tensor{name, std::move(m), trainable};
  }
  if (r.pos() != buf.size() - 8) throw Error(p + ": trailing bytes before CRC");

  Checkpoint ck;
  const ModuleConfig mc = module_config_from_json(header.at("module"));
  ParameterSet module_params;
  const TemporalModule skeleton = TemporalModule::shape_only(mc);
  for (const auto& t : skeleton.params().tensors()) {
    auto it = tensors.find(t.name);
    if (it == tensors.end()) throw Error(p + ": missing tensor '" + t.name + "'");
    module_params.add(t.name, it->second.value, t.trainable);
  }
  ck.model.module = TemporalModule(mc, module_params);
  ck.model.classes = header.at("classes").get<std::vector<std::string>>();
  ck.model.readout = Readout(mc.exposed_dim(), static_cast<int>(ck.model.classes.size()), 0);
  for (auto& t : ck.model.readout.params().tensors()) {
    auto it = tensors.find(t.name);
    if (it == tensors.end()) throw Error(p + ": missing tensor '" + t.name + "'");
    if (it->second.value.rows() != t.value.rows() || it->second.value.cols() != t.value.cols())
      throw Error(p + ": tensor '" + t.name + "' does not match the configured shape");
    t.value = it->second.value;
  }
  const auto& mean = tensors.at("norm.mean").value;
  const auto& inv = tensors.at("norm.inv_std").value;
  if (mean.size() != mc.input_dim || inv.size() != mc.input_dim)
    throw Error(p + ": normalizer does not match the module input");
  ck.model.normalizer.mean = mean.cast<float>();
  ck.model.normalizer.inv_std = inv.cast<float>();
  ck.model.frontend = frontend_config_from_json(header.at("frontend"));
  ck.model.feature_kind = parse_feature_kind(header.at("features").get<std::string>());
  for (const auto& [name, t] : tensors) {
    if (name.rfind("adam.m.", 0) == 0) ck.optimizer.m[name.substr(7)] = t.value;
    if (name.rfind("adam.v.", 0) == 0) ck.optimizer.v[name.substr(7)] = t.value;
  }
  ck.optimizer.step = header.at("adam_step").get<std::int64_t>();
  ck.train = train_config_from_json(header.at("train"));
  ck.epoch = header.at("epoch").get<int>();
  ck.val_psds1 = header.at("val_psds1").get<double>();
  ck.config_hash = header.at("config_hash").get<std::uint64_t>();
  if (ck.config_hash != config_hash(ck.model, ck.train)) throw Error(p + ": config hash mismatch");
  return ck;
}

// --------------------------------------------------------------------- fit

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"lr", r.lr}, {"seconds", r.seconds}};
  j["val_psds1"] = r.val_psds1 ? nlohmann::json(*r.val_psds1) : nlohmann::json(nullptr);
  if (r.eval_loss) j["eval_loss"] = *r.eval_loss;
  return j;
}

namespace {

// Loss and gradients of one mini-batch; clips of different lengths are
// processed in groups and combined with frame-count weights.
LossAndGradients batch_gradients(const Model& model, const std::vector<const FeatureMatrix*>& feats,
                                 const std::vector<const ActivityMatrix*>& targets,
                                 const std::vector<const MatrixXd*>* hidden, Rng& rng) {
  std::map<Eigen::Index, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < feats.size(); ++i) groups[feats[i]->rows()].push_back(i);
  if (groups.size() == 1) {
    if (hidden) return readout_backward(model.readout, *hidden, targets);
    return backward(model.module, model.readout, feats, targets, true, &rng);
  }
  double total = 0.0;
  for (const auto& [len, idx] : groups) total += static_cast<double>(len) * static_cast<double>(idx.size());
  LossAndGradients out;
  for (const auto& [len, idx] : groups) {
    std::vector<const FeatureMatrix*> f;
    std::vector<const ActivityMatrix*> t;
    std::vector<const MatrixXd*> h;
    for (std::size_t i : idx) {
      f.push_back(feats[i]);
      t.push_back(targets[i]);
      if (hidden) h.push_back((*hidden)[i]);
    }
    const LossAndGradients part = hidden ? readout_backward(model.readout, h, t)
                                         : backward(model.module, model.readout, f, t, true, &rng);
    const double w = static_cast<double>(len) * static_cast<double>(idx.size()) / total;
    out.loss += w * part.loss;
    for (const auto& [name, g] : part.grads) {
      auto it = out.grads.find(name);
      if (it == out.grads.end()) {
        out.grads.emplace(name, w * g);
      } else {
        it->second += w * g;
      }
    }
  }
  return out;
}

}  // namespace

FitResult fit(Model model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
              const FitOptions& opts) {
  cfg.validate();
  if (train.size() == 0) throw Error("training set is empty");
  const bool by_psds = opts.selection == Selection::kValPsds1;
  if (by_psds && val.size() == 0) throw Error("validation set is empty");
  if (train.classes != model.classes || (by_psds && val.classes != model.classes))
    throw Error("dataset classes do not match the model");

  const auto train_feats = normalize_all(model, train.features);
  const auto val_feats = by_psds ? normalize_all(model, val.features) : std::vector<FeatureMatrix>{};
  const auto train_ptrs = pointers(train_feats);
  const auto val_ptrs = pointers(val_feats);

  FitResult res;
  res.frozen_hash_before = model.module.params().frozen_hash();

  // Frozen modules: exposed states never change, so compute them once.
  const bool cached = readout_only(model.module);
  std::vector<MatrixXd> train_hidden, val_hidden;
  auto cache_states = [&](const std::vector<const FeatureMatrix*>& ptrs, std::vector<MatrixXd>& out) {
    out.resize(ptrs.size());
    for_each_chunk(ptrs, [&](const std::vector<std::size_t>& idx, const std::vector<const FeatureMatrix*>& batch) {
      auto h = hidden_states_batch(model.module, batch);
      for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] = std::move(h[k]);
    });
  };
  if (cached) {
    cache_states(train_ptrs, train_hidden);
    cache_states(val_ptrs, val_hidden);
  }
  auto posteriors = [&](const std::vector<const FeatureMatrix*>& ptrs, const std::vector<MatrixXd>& hidden) {
    if (!cached) return predict_normalized(model, ptrs);
    std::vector<MatrixXd> out(ptrs.size());
    for_each_chunk(ptrs, [&](const std::vector<std::size_t>& idx, const std::vector<const FeatureMatrix*>&) {
      std::vector<const MatrixXd*> h;
      for (std::size_t i : idx) h.push_back(&hidden[i]);
      auto post = readout_forward(model.readout, h);
      for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] = std::move(post[k]);
    });
    return out;
  };

  std::ofstream log;
  if (opts.log_path) {
    log.open(*opts.log_path);
    if (!log) throw Error("cannot write training log " + opts.log_path->string());
  }

  Rng shuffle_rng(cfg.seed);
  Rng dropout_rng(cfg.seed ^ 0x6A09E667F3BCC908ULL);
  AdamState state;
  double best_score = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  int last_stable = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<ParameterSet*> sets{&model.module.params(), &model.readout.params()};

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0, weight_sum = 0.0;
    int batch_no = 0;
    for (std::size_t a = 0; a < order.size(); a += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
      const std::size_t b = std::min(order.size(), a + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const FeatureMatrix*> f;
      std::vector<const ActivityMatrix*> t;
      std::vector<const MatrixXd*> h;
      double frames = 0.0;
      for (std::size_t k = a; k < b; ++k) {
        f.push_back(train_ptrs[order[k]]);
        t.push_back(&train.targets[order[k]]);
        if (cached) h.push_back(&train_hidden[order[k]]);
        frames += static_cast<double>(f.back()->rows());
      }
      const LossAndGradients lg = batch_gradients(model, f, t, cached ? &h : nullptr, dropout_rng);
      auto diverged = [&](const std::string& what) {
        return Error("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                     std::to_string(batch_no) + " (" + what + "); last stable epoch " +
                     std::to_string(last_stable));
      };
      if (!std::isfinite(lg.loss)) throw diverged("loss is not finite");
      try {
        adam_step(sets, lg.grads, state, cfg);
      } catch (const Error& e) {
        throw diverged(e.what());
      }
      loss_sum += lg.loss * frames;
      weight_sum += frames;
    }
    last_stable = epoch;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / weight_sum;
    rec.lr = cfg.learning_rate;
    double score;
    if (by_psds) {
      rec.val_psds1 = psds(val.clips, posteriors(val_ptrs, val_hidden), model.classes, 1, opts.psds).psds;
      score = *rec.val_psds1;
    } else {
      rec.eval_loss = bce(posteriors(train_ptrs, train_hidden), train.targets);
      score = -*rec.eval_loss;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(rec);
    if (log) log << to_json(rec).dump() << '\n' << std::flush;
    if (opts.on_epoch) opts.on_epoch(rec);

    if (score > best_score) {
      best_score = score;
      since_best = 0;
      res.best.model = model;
      res.best.optimizer = state;
      res.best.epoch = epoch;
      res.best.val_psds1 = rec.val_psds1.value_or(0.0);
    } else if (++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  res.best.train = cfg;
  res.best.config_hash = config_hash(res.best.model, cfg);
  res.frozen_hash_after = model.module.params().frozen_hash();
  return res;
}

}  // namespace tsed
