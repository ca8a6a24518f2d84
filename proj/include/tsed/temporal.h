// Gated state-dynamics temporal modules and the shared sigmoid readout.
//
// Every recurrent kind follows
//   s_t = retention * s_{t-1} + update * candidate(z_t, h_{t-1})
//   h_t = output * phi(s_t)
// with the gating pattern fixed by the kind:
//   linear  retention 0, update 1, output 1   (h_t = z_t, no recurrence)
//   gru     retention 1-u_t, update u_t, output 1
//   lstm    retention f_t, update i_t, output o_t, phi = tanh
//   esn     retention 1-alpha, update alpha, output 1, frozen weights
//
// Sequences are stored time-major as dim x (T*B) matrices: the B clips of
// frame t occupy columns [t*B, (t+1)*B).

#ifndef TSED_TEMPORAL_H_
#define TSED_TEMPORAL_H_

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tsed/audio.h"
#include "tsed/timeline.h"

namespace tsed {

using Rng = std::mt19937_64;

enum class ModelKind { kLinear, kGru, kLstm, kEsn };
enum class Direction { kUni, kBi };

std::string to_string(ModelKind k);
std::string to_string(Direction d);
ModelKind parse_model_kind(const std::string& s);

struct EsnParams {
  double spectral_radius = 0.9;
  double leak = 0.5;
  double input_scale = 1.0;
  double density = 0.1;
  std::uint64_t seed = 0;
};

struct ModuleConfig {
  ModelKind kind = ModelKind::kGru;
  Direction direction = Direction::kUni;
  int input_dim = 0;
  /// Hidden units per direction (reservoir size for esn). Ignored for linear.
  int hidden = 256;
  /// Stacked recurrent layers for gru/lstm; esn always has one reservoir.
  int layers = 2;
  std::optional<int> input_projection;
  /// Active only in train mode, gru/lstm only.
  double dropout = 0.3;
  EsnParams esn;
  std::uint64_t init_seed = 0;

  bool bidirectional() const { return direction == Direction::kBi; }
  int num_directions() const { return bidirectional() ? 2 : 1; }
  int num_layers() const;
  /// Input width of the recurrent stack (after projection).
  int stack_input_dim() const { return input_projection ? *input_projection : input_dim; }
  /// Dimension of h_t as seen by the readout.
  int exposed_dim() const;
  void validate() const;
};

struct Tensor {
  std::string name;
  Eigen::MatrixXd value;
  bool trainable = true;
};

/// Ordered named tensors.
class ParameterSet {
 public:
  Tensor& add(std::string name, Eigen::MatrixXd value, bool trainable);
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor* find(const std::string& name) const;
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  std::int64_t count(bool trainable_only) const;
  /// Fingerprint of all frozen tensors.
  std::uint64_t frozen_hash() const;

 private:
  std::vector<Tensor> tensors_;
};

/// Gradients keyed by tensor name; only trainable tensors appear.
using Gradients = std::map<std::string, Eigen::MatrixXd>;

class TemporalModule {
 public:
  TemporalModule() = default;
  explicit TemporalModule(ModuleConfig cfg);
  /// Rebuilds structure from config and takes tensor values from `params`.
  TemporalModule(ModuleConfig cfg, ParameterSet params);
  /// Same tensor layout with zero-filled reservoirs; enough for counting and
  /// shape checks without paying for reservoir generation.
  static TemporalModule shape_only(ModuleConfig cfg);

  const ModuleConfig& config() const { return cfg_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }

 private:
  ModuleConfig cfg_;
  ParameterSet params_;
};

class Readout {
 public:
  Readout() = default;
  Readout(int exposed_dim, int num_classes, std::uint64_t seed);

  int num_classes() const { return static_cast<int>(params_.at("readout.weight").value.rows()); }
  int input_dim() const { return static_cast<int>(params_.at("readout.weight").value.cols()); }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }

 private:
  ParameterSet params_;
};

std::int64_t count_trainable(const TemporalModule& module, const Readout& readout);

struct Reservoir {
  Eigen::MatrixXd recurrent;  // N x N, sparse pattern stored dense
  Eigen::MatrixXd input;      // N x input_dim, already scaled by input_scale
};

/// Sparse random reservoir rescaled to the requested spectral radius.
Reservoir build_reservoir(int size, int input_dim, const EsnParams& p);

/// Largest eigenvalue magnitude (LAPACK dgeev).
double spectral_radius(const Eigen::MatrixXd& m);

// --- Single-step interface (unidirectional modules) ---

struct LayerState {
  Eigen::VectorXd s;  // internal state (cell for lstm)
  Eigen::VectorXd h;  // exposed state
};
using ModuleState = std::vector<LayerState>;

struct GateValues {
  Eigen::VectorXd retention;
  Eigen::VectorXd update;
  Eigen::VectorXd output;
};

struct StepResult {
  ModuleState state;
  Eigen::VectorXd h;
  /// One entry per recurrent layer; empty for linear.
  std::vector<GateValues> gates;
};

ModuleState initial_state(const TemporalModule& module);
/// One recurrence step; z_t has the module's raw input dimension.
StepResult step(const TemporalModule& module, const ModuleState& state,
                const Eigen::VectorXd& z_t);

// --- Sequence interface ---

/// Exposed states of the last layer for one clip (T x exposed_dim), with the
/// recurrence started from zero (or from `init` for unidirectional modules).
Eigen::MatrixXd hidden_states(const TemporalModule& module, const FeatureMatrix& features,
                              const ModuleState* init = nullptr);

/// Exposed states for a batch of clips sharing T, one T x exposed_dim matrix each.
std::vector<Eigen::MatrixXd> hidden_states_batch(const TemporalModule& module,
                                                 const std::vector<const FeatureMatrix*>& batch);

/// Frame posteriors (T x C), each strictly inside (0, 1).
Eigen::MatrixXd forward(const TemporalModule& module, const Readout& readout,
                        const FeatureSequence& features, bool train_mode = false,
                        Rng* rng = nullptr);

/// Batched posteriors; all clips must share T. Returns one T x C matrix per clip.
std::vector<Eigen::MatrixXd> forward_batch(const TemporalModule& module, const Readout& readout,
                                           const std::vector<const FeatureMatrix*>& batch,
                                           bool train_mode = false, Rng* rng = nullptr);

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
};

/// Mean frame/class binary cross-entropy and exact gradients for every
/// trainable tensor of module and readout. Targets are T x C in {0, 1}.
LossAndGradients backward(const TemporalModule& module, const Readout& readout,
                          const std::vector<const FeatureMatrix*>& batch,
                          const std::vector<const ActivityMatrix*>& targets,
                          bool train_mode = false, Rng* rng = nullptr);
LossAndGradients backward(const TemporalModule& module, const Readout& readout,
                          const FeatureSequence& features, const FrameActivity& targets);

/// Readout-only loss and gradients given precomputed exposed states (T x H each).
LossAndGradients readout_backward(const Readout& readout,
                                  const std::vector<const Eigen::MatrixXd*>& hidden,
                                  const std::vector<const ActivityMatrix*>& targets);
std::vector<Eigen::MatrixXd> readout_forward(const Readout& readout,
                                             const std::vector<const Eigen::MatrixXd*>& hidden);

/// True when no tensor upstream of the readout is trainable, so exposed
/// states can be computed once and cached.
bool readout_only(const TemporalModule& module);

/// Swaps forward/backward parameter blocks and permutes the downstream
/// columns so that the swapped model on time-reversed input reproduces the
/// original model's output reversed in time.
void swap_directions(TemporalModule& module, Readout& readout);

}  // namespace tsed

#endif  // TSED_TEMPORAL_H_
