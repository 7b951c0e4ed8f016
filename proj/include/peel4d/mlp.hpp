#pragma once

#include <Eigen/Core>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "peel4d/errors.hpp"

namespace peel4d {

enum class Activation { identity, relu, softplus, sigmoid };

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
inline T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <class T>
inline T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
inline T inverse_softplus(T y) {
  return y > T(20) ? y : std::log(std::expm1(y));
}

// Fully connected stack: ReLU between hidden layers, per-output activation on
// the last layer. Batches are column-major (features x samples).
template <class T>
struct Mlp {
  std::vector<int> widths;
  std::vector<Matrix<T>> weights;  // out x in
  std::vector<Vector<T>> biases;
  std::vector<Activation> output_act;

  Mlp() = default;
  Mlp(std::vector<int> w, std::vector<Activation> out_act) : widths(std::move(w)), output_act(std::move(out_act)) {
    if (widths.size() < 2) throw ConfigError("mlp needs at least input and output widths");
    if (output_act.size() != static_cast<std::size_t>(widths.back()))
      throw ConfigError("mlp output activation count must equal output width");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      weights.emplace_back(Matrix<T>::Zero(widths[l + 1], widths[l]));
      biases.emplace_back(Vector<T>::Zero(widths[l + 1]));
    }
  }

  int input_width() const { return widths.front(); }
  int output_width() const { return widths.back(); }
  std::size_t layers() const { return weights.size(); }

  // Uniform +-1/sqrt(fan_in) weights, zero biases.
  template <class Rng>
  void init(Rng& rng) {
    for (std::size_t l = 0; l < layers(); ++l) {
      std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(double(widths[l])),
                                                  1.0 / std::sqrt(double(widths[l])));
      for (Eigen::Index i = 0; i < weights[l].size(); ++i) weights[l].data()[i] = T(dist(rng));
      biases[l].setZero();
    }
  }

  void set_zero() {
    for (auto& w : weights) w.setZero();
    for (auto& b : biases) b.setZero();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layers(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  // Visits every tensor in the fixed serialization order W0, b0, W1, b1, ...
  template <class Fn>
  void for_each_tensor(Fn&& fn) {
    for (std::size_t l = 0; l < layers(); ++l) {
      fn(std::span<T>(weights[l].data(), weights[l].size()));
      fn(std::span<T>(biases[l].data(), biases[l].size()));
    }
  }
  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    for (std::size_t l = 0; l < layers(); ++l) {
      fn(std::span<const T>(weights[l].data(), weights[l].size()));
      fn(std::span<const T>(biases[l].data(), biases[l].size()));
    }
  }

  Mlp zeros_like() const {
    Mlp g = *this;
    g.set_zero();
    return g;
  }

  Mlp& operator+=(const Mlp& o) {
    for (std::size_t l = 0; l < layers(); ++l) {
      weights[l] += o.weights[l];
      biases[l] += o.biases[l];
    }
    return *this;
  }

  template <class U>
  Mlp<U> cast() const {
    Mlp<U> m;
    m.widths = widths;
    m.output_act = output_act;
    for (std::size_t l = 0; l < layers(); ++l) {
      m.weights.push_back(weights[l].template cast<U>());
      m.biases.push_back(biases[l].template cast<U>());
    }
    return m;
  }
};

// Cached activations of a batched forward pass: inputs[l] is the input of
// layer l, pre[l] its affine output.
template <class T>
struct MlpTape {
  std::vector<Matrix<T>> inputs;
  std::vector<Matrix<T>> pre;
};

template <class T>
inline T activate(Activation a, T x) {
  switch (a) {
    case Activation::relu:
      return x > T(0) ? x : T(0);
    case Activation::softplus:
      return softplus(x);
    case Activation::sigmoid:
      return sigmoid(x);
    case Activation::identity:
      break;
  }
  return x;
}

template <class T>
inline T activate_grad(Activation a, T x) {
  switch (a) {
    case Activation::relu:
      return x > T(0) ? T(1) : T(0);
    case Activation::softplus:
      return sigmoid(x);
    case Activation::sigmoid: {
      const T s = sigmoid(x);
      return s * (T(1) - s);
    }
    case Activation::identity:
      break;
  }
  return T(1);
}

// Batched forward; X is (input_width x n).
template <class T>
Matrix<T> mlp_forward_batch(const Mlp<T>& m, const Matrix<T>& X, MlpTape<T>* tape = nullptr) {
  if (X.rows() != m.input_width()) throw ConfigError("mlp input width mismatch");
  if (tape) {
    tape->inputs.resize(m.layers());
    tape->pre.resize(m.layers());
  }
  Matrix<T> h = X;
  for (std::size_t l = 0; l < m.layers(); ++l) {
    Matrix<T> z = m.weights[l] * h;
    z.colwise() += m.biases[l];
    if (tape) {
      tape->inputs[l] = std::move(h);
      tape->pre[l] = z;
    }
    const bool last = l + 1 == m.layers();
    if (!last) {
      h = z.cwiseMax(T(0));
    } else {
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const Activation a = m.output_act[r];
        if (a == Activation::identity) continue;
        for (Eigen::Index c = 0; c < z.cols(); ++c) z(r, c) = activate(a, z(r, c));
      }
      h = std::move(z);
    }
  }
  return h;
}

// Batched reverse pass. Accumulates parameter gradients into `grad` and
// returns dX when requested.
template <class T>
Matrix<T> mlp_backward_batch(const Mlp<T>& m, const MlpTape<T>& tape, const Matrix<T>& dY, Mlp<T>& grad,
                             bool need_dx = true) {
  Matrix<T> dz = dY;
  for (std::size_t li = m.layers(); li-- > 0;) {
    const Matrix<T>& z = tape.pre[li];
    if (li + 1 == m.layers()) {
      for (Eigen::Index r = 0; r < dz.rows(); ++r) {
        const Activation a = m.output_act[r];
        if (a == Activation::identity) continue;
        for (Eigen::Index c = 0; c < dz.cols(); ++c) dz(r, c) *= activate_grad(a, z(r, c));
      }
    } else {
      dz = dz.cwiseProduct((z.array() > T(0)).template cast<T>().matrix());
    }
    grad.weights[li].noalias() += dz * tape.inputs[li].transpose();
    grad.biases[li] += dz.rowwise().sum();
    if (li > 0 || need_dx) dz = m.weights[li].transpose() * dz;
  }
  return need_dx ? dz : Matrix<T>();
}

template <class T>
struct MlpResult {
  Vector<T> y;
  MlpTape<T> tape;
};

template <class T>
MlpResult<T> mlp_forward(const Mlp<T>& m, const Vector<T>& x) {
  MlpResult<T> r;
  r.y = mlp_forward_batch(m, Matrix<T>(x), &r.tape);
  return r;
}

template <class T>
Vector<T> mlp_backward(const Mlp<T>& m, const MlpTape<T>& tape, const Vector<T>& dy, Mlp<T>& grad) {
  return mlp_backward_batch(m, tape, Matrix<T>(dy), grad, true);
}

}  // namespace peel4d
