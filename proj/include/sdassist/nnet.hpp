#pragma once

// Small dense network library: MLP, vanilla RNN, LSTM and GRU with exact
// reverse-mode gradients (BPTT for recurrent nets), Adam, and a JSON weight
// format. Everything is 64-bit and column-batched: a batch is a matrix with
// one sample per column.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sdassist/common.hpp"

namespace sdassist::nnet {

enum class Arch { MLP, RNN, LSTM, GRU };
enum class Activation { Tanh, Linear, Sigmoid };
enum class Loss { MSE, BCE };

std::string to_string(Arch arch);
std::string to_string(Activation act);
Arch arch_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct NetworkSpec {
  Arch arch = Arch::MLP;
  int input_dim = 1;
  std::vector<int> hidden_dims;  // MLP: layer widths; recurrent: stacked layer sizes
  int output_dim = 1;
  Activation output_activation = Activation::Linear;

  bool recurrent() const { return arch != Arch::MLP; }
  void validate() const;
  bool operator==(const NetworkSpec&) const = default;
};

struct ShapeEntry {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;

  std::size_t extent() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  bool operator==(const ShapeEntry&) const = default;
};

// Shape table for a spec. The order is fixed per architecture and is the
// order of blocks in the flat storage.
std::vector<ShapeEntry> layout(const NetworkSpec& spec);

// Flat row-major weight storage plus the shape table that slices it.
class Parameters {
 public:
  Parameters() = default;
  explicit Parameters(std::vector<ShapeEntry> shapes);
  Parameters(std::vector<ShapeEntry> shapes, std::vector<double> data);

  std::size_t size() const { return data_.size(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<ShapeEntry>& shapes() const { return shapes_; }

  Eigen::Map<RowMatrix> block(std::size_t index);
  Eigen::Map<const RowMatrix> block(std::size_t index) const;

  // Throws ShapeError when the table and storage disagree, InvalidArgument on non-finite values.
  void validate() const;

  bool operator==(const Parameters&) const = default;

 private:
  std::vector<ShapeEntry> shapes_;
  std::vector<double> data_;
};

// Glorot-uniform matrices, zero biases; deterministic in seed.
Parameters init(const NetworkSpec& spec, std::uint64_t seed);

// Per-layer initial hidden (and, for LSTM, cell) state. Empty means zeros.
struct HiddenState {
  std::vector<Matrix> h;
  std::vector<Matrix> c;
};

// Everything backward() needs from a forward pass.
struct Tape {
  int batch = 0;
  int steps = 0;
  std::vector<Matrix> acts;                       // MLP: acts[0] = input, acts[l+1] = layer output
  std::vector<std::vector<Matrix>> layer_in;      // [layer][t] input to each recurrent layer
  std::vector<std::vector<Matrix>> h;             // [layer][t], t = 0 is the initial state
  std::vector<std::vector<Matrix>> c;             // LSTM cell states, same indexing as h
  std::vector<std::vector<std::vector<Matrix>>> gates;  // [layer][t][gate]
  Matrix output;                                  // post-activation output (output_dim x batch)
};

// Batched forward. `sequence` holds one (input_dim x batch) matrix per time
// step; MLPs take exactly one step. Returns output_dim x batch.
Matrix forward_batch(const NetworkSpec& spec, const Parameters& params,
                     const std::vector<Matrix>& sequence, Tape* tape = nullptr,
                     const HiddenState* initial = nullptr);

// Final hidden state of every recurrent layer after consuming the sequence.
HiddenState final_state(const NetworkSpec& spec, const Tape& tape);

// Reverse pass. `d_output` is dLoss/d(output) after the output activation,
// or before it when `preactivation` is set. Parameter gradients are ADDED to
// `grad`. When `d_inputs` is given it receives dLoss/d(input) per step.
void backward_batch(const NetworkSpec& spec, const Parameters& params, const Tape& tape,
                    const Matrix& d_output, std::span<double> grad,
                    std::vector<Matrix>* d_inputs = nullptr, bool preactivation = false);

// Single-sample convenience wrapper.
Vector forward(const NetworkSpec& spec, const Parameters& params, const std::vector<Vector>& sequence,
               const HiddenState* initial = nullptr);

struct Example {
  std::vector<Vector> sequence;
  Vector target;
};

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> grad;
};

// Mean loss over the batch and its exact gradient. MSE sums squared error
// over output components; BCE expects a sigmoid head.
LossAndGradient gradients(const NetworkSpec& spec, const Parameters& params,
                          std::span<const Example> batch, Loss loss);

double loss_value(const NetworkSpec& spec, const Parameters& params, std::span<const Example> batch,
                  Loss loss);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState create(std::size_t n, double lr);
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& opt);
inline void adam_step(Parameters& params, std::span<const double> grads, AdamState& opt) {
  adam_step(params.values(), grads, opt);
}

// Weight file: {"version":1,"arch":..,"dims":{..},"shapes":[..],"data":[..]}.
void save(const NetworkSpec& spec, const Parameters& params, const std::filesystem::path& path);
struct Model;
Model load(const std::filesystem::path& path);

struct Model {
  NetworkSpec spec;
  Parameters params;
};

std::string to_json_string(const NetworkSpec& spec, const Parameters& params);
Model from_json_string(const std::string& text);

}  // namespace sdassist::nnet
