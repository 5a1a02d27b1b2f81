#include "sdassist/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sdassist::nnet {

namespace {

#if defined(__GLIBC__)
// Batch activations are a few hundred KB; keep them on the heap instead of
// paying an mmap/munmap round trip for every temporary.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 128 << 20);
  return true;
}();
#endif

int gate_count(Arch arch) {
  switch (arch) {
    case Arch::RNN: return 1;
    case Arch::GRU: return 3;
    case Arch::LSTM: return 4;
    case Arch::MLP: return 0;
  }
  return 0;
}

const char* gate_names(Arch arch, int g) {
  static const char* gru[] = {"z", "r", "n"};
  static const char* lstm[] = {"i", "f", "o", "g"};
  switch (arch) {
    case Arch::GRU: return gru[g];
    case Arch::LSTM: return lstm[g];
    default: return "h";
  }
}

Matrix sigmoid(const Matrix& a) { return (1.0 + (-a.array()).exp()).inverse().matrix(); }

Matrix apply_output(Activation act, const Matrix& z) {
  switch (act) {
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Sigmoid: return sigmoid(z);
    case Activation::Linear: return z;
  }
  return z;
}

// dLoss/dz from dLoss/dy for the output activation.
Matrix output_backward(Activation act, const Matrix& y, const Matrix& dy) {
  switch (act) {
    case Activation::Tanh: return (dy.array() * (1.0 - y.array().square())).matrix();
    case Activation::Sigmoid: return (dy.array() * y.array() * (1.0 - y.array())).matrix();
    case Activation::Linear: return dy;
  }
  return dy;
}

// Mutable view of a gradient buffer with the same shape table as the parameters.
Eigen::Map<RowMatrix> grad_block(std::span<double> grad, const ShapeEntry& s) {
  return Eigen::Map<RowMatrix>(grad.data() + s.offset, s.rows, s.cols);
}

std::size_t head_index(const NetworkSpec& spec) {
  return spec.hidden_dims.size() * 3 * gate_count(spec.arch);
}

std::size_t block_index(const NetworkSpec& spec, std::size_t layer, int gate, int which) {
  return layer * 3 * gate_count(spec.arch) + 3 * gate + which;
}

}  // namespace

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::MLP: return "MLP";
    case Arch::RNN: return "RNN";
    case Arch::LSTM: return "LSTM";
    case Arch::GRU: return "GRU";
  }
  return "?";
}

std::string to_string(Activation act) {
  switch (act) {
    case Activation::Tanh: return "tanh";
    case Activation::Linear: return "linear";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

Arch arch_from_string(const std::string& s) {
  if (s == "MLP") return Arch::MLP;
  if (s == "RNN") return Arch::RNN;
  if (s == "LSTM") return Arch::LSTM;
  if (s == "GRU") return Arch::GRU;
  throw FormatError("unsupported architecture: " + s);
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "linear") return Activation::Linear;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw FormatError("unsupported output activation: " + s);
}

void NetworkSpec::validate() const {
  if (input_dim < 1 || output_dim < 1) throw InvalidArgument("network spec: dims must be >= 1");
  for (int h : hidden_dims) {
    if (h < 1) throw InvalidArgument("network spec: hidden dims must be >= 1");
  }
  if (recurrent() && hidden_dims.empty()) {
    throw InvalidArgument("network spec: recurrent nets need at least one hidden layer");
  }
}

std::vector<ShapeEntry> layout(const NetworkSpec& spec) {
  spec.validate();
  std::vector<ShapeEntry> shapes;
  std::size_t offset = 0;
  auto add = [&](std::string name, int rows, int cols) {
    shapes.push_back({std::move(name), rows, cols, offset});
    offset += shapes.back().extent();
  };
  if (spec.arch == Arch::MLP) {
    int in = spec.input_dim;
    std::size_t l = 0;
    for (int h : spec.hidden_dims) {
      add("W" + std::to_string(l), h, in);
      add("b" + std::to_string(l), h, 1);
      in = h;
      ++l;
    }
    add("W" + std::to_string(l), spec.output_dim, in);
    add("b" + std::to_string(l), spec.output_dim, 1);
    return shapes;
  }
  int in = spec.input_dim;
  for (std::size_t l = 0; l < spec.hidden_dims.size(); ++l) {
    const int h = spec.hidden_dims[l];
    const std::string p = "L" + std::to_string(l) + ".";
    for (int g = 0; g < gate_count(spec.arch); ++g) {
      const std::string gn = gate_names(spec.arch, g);
      add(p + "W" + gn, h, in);
      add(p + "U" + gn, h, h);
      add(p + "b" + gn, h, 1);
    }
    in = h;
  }
  add("head.W", spec.output_dim, in);
  add("head.b", spec.output_dim, 1);
  return shapes;
}

Parameters::Parameters(std::vector<ShapeEntry> shapes) : shapes_(std::move(shapes)) {
  std::size_t total = 0;
  for (const auto& s : shapes_) total += s.extent();
  data_.assign(total, 0.0);
}

Parameters::Parameters(std::vector<ShapeEntry> shapes, std::vector<double> data)
    : shapes_(std::move(shapes)), data_(std::move(data)) {
  validate();
}

Eigen::Map<RowMatrix> Parameters::block(std::size_t index) {
  const auto& s = shapes_.at(index);
  return Eigen::Map<RowMatrix>(data_.data() + s.offset, s.rows, s.cols);
}

Eigen::Map<const RowMatrix> Parameters::block(std::size_t index) const {
  const auto& s = shapes_.at(index);
  return Eigen::Map<const RowMatrix>(data_.data() + s.offset, s.rows, s.cols);
}

void Parameters::validate() const {
  std::size_t offset = 0;
  for (const auto& s : shapes_) {
    if (s.rows < 1 || s.cols < 1 || s.offset != offset) {
      throw ShapeError("parameters: inconsistent shape table at '" + s.name + "'");
    }
    offset += s.extent();
  }
  if (offset != data_.size()) {
    throw ShapeError("parameters: shape table covers " + std::to_string(offset) +
                     " values but storage holds " + std::to_string(data_.size()));
  }
  for (double v : data_) {
    if (!std::isfinite(v)) throw InvalidArgument("parameters: non-finite value");
  }
}

Parameters init(const NetworkSpec& spec, std::uint64_t seed) {
  Parameters p(layout(spec));
  Rng rng(seed);
  for (std::size_t i = 0; i < p.shapes().size(); ++i) {
    const auto& s = p.shapes()[i];
    const auto dot = s.name.rfind('.');
    const char lead = s.name[dot == std::string::npos ? 0 : dot + 1];
    if (lead == 'b') continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
    auto m = p.block(i);
    for (int r = 0; r < s.rows; ++r) {
      for (int c = 0; c < s.cols; ++c) m(r, c) = uniform(rng, -limit, limit);
    }
  }
  return p;
}

Matrix forward_batch(const NetworkSpec& spec, const Parameters& params,
                     const std::vector<Matrix>& sequence, Tape* tape, const HiddenState* initial) {
  if (sequence.empty()) throw ShapeError("forward: empty input sequence");
  const Eigen::Index batch = sequence.front().cols();
  for (const auto& x : sequence) {
    if (x.rows() != spec.input_dim || x.cols() != batch) {
      throw ShapeError("forward: input has " + std::to_string(x.rows()) + " rows, network expects " +
                       std::to_string(spec.input_dim));
    }
  }
  const std::size_t expected_blocks = spec.arch == Arch::MLP
                                          ? 2 * (spec.hidden_dims.size() + 1)
                                          : head_index(spec) + 2;
  if (params.size() == 0 || params.shapes().size() != expected_blocks ||
      params.shapes().back().rows != spec.output_dim) {
    throw ShapeError("forward: parameters do not match network spec");
  }
  Tape local;
  Tape& tp = tape ? *tape : local;
  tp = Tape{};
  tp.batch = static_cast<int>(batch);
  tp.steps = static_cast<int>(sequence.size());

  if (spec.arch == Arch::MLP) {
    if (sequence.size() != 1) throw ShapeError("forward: MLP takes a single flattened input");
    const std::size_t layers = spec.hidden_dims.size() + 1;
    tp.acts.reserve(layers + 1);
    tp.acts.push_back(sequence.front());
    for (std::size_t l = 0; l < layers; ++l) {
      Matrix z = params.block(2 * l) * tp.acts.back();
      z.colwise() += params.block(2 * l + 1).col(0);
      if (l + 1 < layers) {
        tp.acts.push_back(z.cwiseMax(0.0));
      } else {
        tp.acts.push_back(apply_output(spec.output_activation, z));
      }
    }
    tp.output = tp.acts.back();
    return tp.output;
  }

  const std::size_t layers = spec.hidden_dims.size();
  const int gates = gate_count(spec.arch);
  const std::size_t steps = sequence.size();
  tp.layer_in.assign(layers, {});
  tp.h.assign(layers, {});
  tp.c.assign(layers, {});
  tp.gates.assign(layers, {});
  for (std::size_t l = 0; l < layers; ++l) {
    const int hd = spec.hidden_dims[l];
    if (l == 0) {
      tp.layer_in[l] = sequence;
    } else {
      tp.layer_in[l].assign(tp.h[l - 1].begin() + 1, tp.h[l - 1].end());
    }
    const std::vector<Matrix>& xs = tp.layer_in[l];
    Matrix h0 = Matrix::Zero(hd, batch);
    Matrix c0 = Matrix::Zero(hd, batch);
    if (initial && l < initial->h.size()) h0 = initial->h[l];
    if (initial && l < initial->c.size()) c0 = initial->c[l];
    if (h0.rows() != hd || h0.cols() != batch) throw ShapeError("forward: bad initial hidden state");
    tp.h[l].reserve(steps + 1);
    tp.h[l].push_back(h0);
    if (spec.arch == Arch::LSTM) tp.c[l].push_back(c0);
    tp.gates[l].reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      const Matrix& x = xs[t];
      const Matrix& hp = tp.h[l][t];
      auto pre = [&](int g, const Matrix& hin) {
        Matrix a = params.block(block_index(spec, l, g, 0)) * x + params.block(block_index(spec, l, g, 1)) * hin;
        a.colwise() += params.block(block_index(spec, l, g, 2)).col(0);
        return a;
      };
      std::vector<Matrix> gv(gates);
      Matrix hn;
      switch (spec.arch) {
        case Arch::RNN:
          gv[0] = pre(0, hp).array().tanh().matrix();
          hn = gv[0];
          break;
        case Arch::GRU: {
          gv[0] = sigmoid(pre(0, hp));
          gv[1] = sigmoid(pre(1, hp));
          const Matrix rh = gv[1].cwiseProduct(hp);
          gv[2] = pre(2, rh).array().tanh().matrix();
          hn = ((1.0 - gv[0].array()) * hp.array() + gv[0].array() * gv[2].array()).matrix();
          break;
        }
        case Arch::LSTM: {
          gv[0] = sigmoid(pre(0, hp));
          gv[1] = sigmoid(pre(1, hp));
          gv[2] = sigmoid(pre(2, hp));
          gv[3] = pre(3, hp).array().tanh().matrix();
          Matrix cn = (gv[1].array() * tp.c[l][t].array() + gv[0].array() * gv[3].array()).matrix();
          hn = (gv[2].array() * cn.array().tanh()).matrix();
          tp.c[l].push_back(std::move(cn));
          break;
        }
        case Arch::MLP: break;
      }
      tp.gates[l].push_back(std::move(gv));
      tp.h[l].push_back(std::move(hn));
    }
  }
  const std::size_t hi = head_index(spec);
  Matrix z = params.block(hi) * tp.h[layers - 1].back();
  z.colwise() += params.block(hi + 1).col(0);
  tp.output = apply_output(spec.output_activation, z);
  return tp.output;
}

HiddenState final_state(const NetworkSpec& spec, const Tape& tape) {
  HiddenState s;
  for (const auto& hs : tape.h) s.h.push_back(hs.back());
  if (spec.arch == Arch::LSTM) {
    for (const auto& cs : tape.c) s.c.push_back(cs.back());
  }
  return s;
}

void backward_batch(const NetworkSpec& spec, const Parameters& params, const Tape& tape,
                    const Matrix& d_output, std::span<double> grad, std::vector<Matrix>* d_inputs,
                    bool preactivation) {
  if (grad.size() != params.size()) throw ShapeError("backward: gradient buffer size mismatch");
  if (d_output.rows() != spec.output_dim || d_output.cols() != tape.batch) {
    throw ShapeError("backward: output gradient shape mismatch");
  }
  const auto& shapes = params.shapes();
  Matrix delta = preactivation ? d_output : output_backward(spec.output_activation, tape.output, d_output);

  if (spec.arch == Arch::MLP) {
    const std::size_t layers = spec.hidden_dims.size() + 1;
    for (std::size_t li = layers; li-- > 0;) {
      grad_block(grad, shapes[2 * li]).noalias() += delta * tape.acts[li].transpose();
      grad_block(grad, shapes[2 * li + 1]).col(0) += delta.rowwise().sum();
      Matrix d_prev = params.block(2 * li).transpose() * delta;
      if (li > 0) {
        delta = (tape.acts[li].array() > 0.0).select(d_prev, 0.0);
      } else if (d_inputs) {
        d_inputs->assign(1, std::move(d_prev));
      }
    }
    return;
  }

  const std::size_t layers = spec.hidden_dims.size();
  const std::size_t steps = static_cast<std::size_t>(tape.steps);
  const std::size_t hi = head_index(spec);
  const Matrix& h_top = tape.h[layers - 1].back();
  grad_block(grad, shapes[hi]).noalias() += delta * h_top.transpose();
  grad_block(grad, shapes[hi + 1]).col(0) += delta.rowwise().sum();

  // External gradient arriving at each layer's hidden output, per time step.
  std::vector<Matrix> dh_ext(steps, Matrix::Zero(spec.hidden_dims.back(), tape.batch));
  dh_ext.back() = params.block(hi).transpose() * delta;

  for (std::size_t l = layers; l-- > 0;) {
    const int hd = spec.hidden_dims[l];
    const auto& xs = tape.layer_in[l];
    const int in_dim = static_cast<int>(xs.front().rows());
    std::vector<Matrix> dx(steps, Matrix::Zero(in_dim, tape.batch));
    Matrix dh_carry = Matrix::Zero(hd, tape.batch);
    Matrix dc_carry = Matrix::Zero(hd, tape.batch);
    auto W = [&](int g) { return params.block(block_index(spec, l, g, 0)); };
    auto U = [&](int g) { return params.block(block_index(spec, l, g, 1)); };
    auto accum = [&](int g, const Matrix& da, const Matrix& x, const Matrix& hin) {
      grad_block(grad, shapes[block_index(spec, l, g, 0)]).noalias() += da * x.transpose();
      grad_block(grad, shapes[block_index(spec, l, g, 1)]).noalias() += da * hin.transpose();
      grad_block(grad, shapes[block_index(spec, l, g, 2)]).col(0) += da.rowwise().sum();
    };
    for (std::size_t t = steps; t-- > 0;) {
      const Matrix& x = xs[t];
      const Matrix& hp = tape.h[l][t];
      const auto& gv = tape.gates[l][t];
      Matrix dh = dh_ext[t] + dh_carry;
      switch (spec.arch) {
        case Arch::RNN: {
          Matrix da = (dh.array() * (1.0 - gv[0].array().square())).matrix();
          accum(0, da, x, hp);
          dx[t].noalias() += W(0).transpose() * da;
          dh_carry = U(0).transpose() * da;
          break;
        }
        case Arch::GRU: {
          const auto& z = gv[0];
          const auto& r = gv[1];
          const auto& n = gv[2];
          Matrix dn = dh.cwiseProduct(z);
          Matrix dz = (dh.array() * (n.array() - hp.array())).matrix();
          Matrix dhp = (dh.array() * (1.0 - z.array())).matrix();
          Matrix dan = (dn.array() * (1.0 - n.array().square())).matrix();
          const Matrix rh = r.cwiseProduct(hp);
          accum(2, dan, x, rh);
          Matrix drh = U(2).transpose() * dan;
          Matrix dr = drh.cwiseProduct(hp);
          dhp += drh.cwiseProduct(r);
          Matrix daz = (dz.array() * z.array() * (1.0 - z.array())).matrix();
          accum(0, daz, x, hp);
          dhp.noalias() += U(0).transpose() * daz;
          Matrix dar = (dr.array() * r.array() * (1.0 - r.array())).matrix();
          accum(1, dar, x, hp);
          dhp.noalias() += U(1).transpose() * dar;
          dx[t].noalias() += W(0).transpose() * daz;
          dx[t].noalias() += W(1).transpose() * dar;
          dx[t].noalias() += W(2).transpose() * dan;
          dh_carry = std::move(dhp);
          break;
        }
        case Arch::LSTM: {
          const auto& i = gv[0];
          const auto& f = gv[1];
          const auto& o = gv[2];
          const auto& g = gv[3];
          const Matrix& c = tape.c[l][t + 1];
          const Matrix& cp = tape.c[l][t];
          const Matrix tc = c.array().tanh().matrix();
          Matrix d_o = dh.cwiseProduct(tc);
          Matrix dc = dc_carry + (dh.array() * o.array() * (1.0 - tc.array().square())).matrix();
          Matrix d_f = dc.cwiseProduct(cp);
          Matrix d_i = dc.cwiseProduct(g);
          Matrix d_g = dc.cwiseProduct(i);
          dc_carry = dc.cwiseProduct(f);
          std::vector<Matrix> da(4);
          da[0] = (d_i.array() * i.array() * (1.0 - i.array())).matrix();
          da[1] = (d_f.array() * f.array() * (1.0 - f.array())).matrix();
          da[2] = (d_o.array() * o.array() * (1.0 - o.array())).matrix();
          da[3] = (d_g.array() * (1.0 - g.array().square())).matrix();
          Matrix dhp = Matrix::Zero(hd, tape.batch);
          for (int gi = 0; gi < 4; ++gi) {
            accum(gi, da[gi], x, hp);
            dhp.noalias() += U(gi).transpose() * da[gi];
            dx[t].noalias() += W(gi).transpose() * da[gi];
          }
          dh_carry = std::move(dhp);
          break;
        }
        case Arch::MLP: break;
      }
    }
    if (l > 0) {
      dh_ext = std::move(dx);
    } else if (d_inputs) {
      *d_inputs = std::move(dx);
    }
  }
}

Vector forward(const NetworkSpec& spec, const Parameters& params, const std::vector<Vector>& sequence,
               const HiddenState* initial) {
  std::vector<Matrix> seq;
  seq.reserve(sequence.size());
  for (const auto& v : sequence) seq.emplace_back(v);
  return forward_batch(spec, params, seq, nullptr, initial).col(0);
}

namespace {

// Pack examples with equal sequence lengths into column batches.
std::vector<Matrix> pack_inputs(std::span<const Example> batch, std::size_t begin, std::size_t end) {
  const std::size_t steps = batch[begin].sequence.size();
  const Eigen::Index dim = batch[begin].sequence.front().size();
  std::vector<Matrix> seq(steps, Matrix(dim, static_cast<Eigen::Index>(end - begin)));
  for (std::size_t j = begin; j < end; ++j) {
    for (std::size_t t = 0; t < steps; ++t) seq[t].col(static_cast<Eigen::Index>(j - begin)) = batch[j].sequence[t];
  }
  return seq;
}

double sample_loss(Loss loss, const Eigen::Ref<const Vector>& y, const Vector& target) {
  if (loss == Loss::MSE) return (y - target).squaredNorm();
  double s = 0.0;
  for (Eigen::Index k = 0; k < y.size(); ++k) {
    const double p = std::clamp(y(k), 1e-12, 1.0 - 1e-12);
    s -= target(k) * std::log(p) + (1.0 - target(k)) * std::log(1.0 - p);
  }
  return s;
}

}  // namespace

LossAndGradient gradients(const NetworkSpec& spec, const Parameters& params,
                          std::span<const Example> batch, Loss loss) {
  if (batch.empty()) throw InvalidArgument("gradients: empty batch");
  if (loss == Loss::BCE && spec.output_activation != Activation::Sigmoid) {
    throw InvalidArgument("gradients: BCE requires a sigmoid output");
  }
  LossAndGradient out;
  out.grad.assign(params.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::size_t begin = 0;
  while (begin < batch.size()) {
    std::size_t end = begin + 1;
    while (end < batch.size() && batch[end].sequence.size() == batch[begin].sequence.size()) ++end;
    for (std::size_t j = begin; j < end; ++j) {
      if (batch[j].target.size() != spec.output_dim) throw ShapeError("gradients: target size mismatch");
      if (batch[j].sequence.empty()) throw ShapeError("gradients: empty input sequence");
    }
    Tape tape;
    const Matrix y = forward_batch(spec, params, pack_inputs(batch, begin, end), &tape);
    Matrix dy(y.rows(), y.cols());
    for (std::size_t j = begin; j < end; ++j) {
      const auto col = static_cast<Eigen::Index>(j - begin);
      const double l = sample_loss(loss, y.col(col), batch[j].target);
      if (!std::isfinite(l)) {
        throw DivergenceError("gradients: non-finite loss at sample " + std::to_string(j));
      }
      out.loss += l * inv_n;
      // For BCE with a sigmoid head the pre-activation gradient is y - t.
      dy.col(col) = (loss == Loss::MSE ? 2.0 : 1.0) * (y.col(col) - batch[j].target) * inv_n;
    }
    backward_batch(spec, params, tape, dy, out.grad, nullptr, loss == Loss::BCE);
    begin = end;
  }
  return out;
}

double loss_value(const NetworkSpec& spec, const Parameters& params, std::span<const Example> batch,
                  Loss loss) {
  if (batch.empty()) throw InvalidArgument("loss_value: empty batch");
  double total = 0.0;
  for (const auto& ex : batch) total += sample_loss(loss, forward(spec, params, ex.sequence), ex.target);
  return total / static_cast<double>(batch.size());
}

AdamState AdamState::create(std::size_t n, double lr) {
  AdamState s;
  s.m.assign(n, 0.0);
  s.v.assign(n, 0.0);
  s.lr = lr;
  return s;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& opt) {
  if (params.size() != grads.size() || opt.m.size() != params.size() || opt.v.size() != params.size()) {
    throw ShapeError("adam_step: length mismatch");
  }
  ++opt.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grads[i];
    opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * grads[i] * grads[i];
    const double mhat = opt.m[i] / bc1;
    const double vhat = opt.v[i] / bc2;
    params[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
  }
}

namespace {
constexpr int kFormatVersion = 1;
}

std::string to_json_string(const NetworkSpec& spec, const Parameters& params) {
  nlohmann::json j;
  j["version"] = kFormatVersion;
  j["arch"] = to_string(spec.arch);
  j["dims"] = {{"input", spec.input_dim},
               {"hidden", spec.hidden_dims},
               {"output", spec.output_dim},
               {"output_activation", to_string(spec.output_activation)}};
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& s : params.shapes()) shapes.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  j["shapes"] = std::move(shapes);
  j["data"] = std::vector<double>(params.values().begin(), params.values().end());
  return j.dump();
}

Model from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weight file: malformed JSON: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != kFormatVersion) {
      throw FormatError("weight file: unsupported version " + j.at("version").dump());
    }
    Model m;
    m.spec.arch = arch_from_string(j.at("arch").get<std::string>());
    const auto& dims = j.at("dims");
    m.spec.input_dim = dims.at("input").get<int>();
    m.spec.hidden_dims = dims.at("hidden").get<std::vector<int>>();
    m.spec.output_dim = dims.at("output").get<int>();
    m.spec.output_activation = activation_from_string(dims.at("output_activation").get<std::string>());
    m.spec.validate();
    std::vector<ShapeEntry> shapes;
    std::size_t offset = 0;
    for (const auto& s : j.at("shapes")) {
      ShapeEntry e{s.at("name").get<std::string>(), s.at("rows").get<int>(), s.at("cols").get<int>(), offset};
      offset += e.extent();
      shapes.push_back(std::move(e));
    }
    if (shapes != layout(m.spec)) throw ShapeError("weight file: shape table does not match architecture");
    m.params = Parameters(std::move(shapes), j.at("data").get<std::vector<double>>());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weight file: ") + e.what());
  }
}

void save(const NetworkSpec& spec, const Parameters& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json_string(spec, params) << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

Model load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelLoadError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_string(ss.str());
}

}  // namespace sdassist::nnet
