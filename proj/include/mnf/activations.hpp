#pragma once

// Piecewise-linear mobile activations (h-swish, hard-sigmoid) next to their
// smooth counterparts, as scalar functions and tensor-wide application.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "mnf/tensor.hpp"

namespace mnf {

enum class Activation {
    Identity,
    ReLU,
    ReLU6,
    Sigmoid,
    HardSigmoid,
    Swish,
    HSwish,
};

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::ReLU: return "relu";
        case Activation::ReLU6: return "relu6";
        case Activation::Sigmoid: return "sigmoid";
        case Activation::HardSigmoid: return "hard_sigmoid";
        case Activation::Swish: return "swish";
        case Activation::HSwish: return "hswish";
    }
    return "?";
}

inline float relu(float x) { return x > 0.0f ? x : 0.0f; }

inline float relu6(float x) {
    if (x < 0.0f) return 0.0f;
    if (x > 6.0f) return 6.0f;
    return x;
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// hard-sigmoid(x) = ReLU6(x + 3) / 6
inline float hard_sigmoid(float x) { return relu6(x + 3.0f) / 6.0f; }

inline float swish(float x) { return x * sigmoid(x); }

// h-swish(x) = x * ReLU6(x + 3) / 6, composed form.
inline float hswish_naive(float x) { return x * (relu6(x + 3.0f) / 6.0f); }

// Three-branch form of h-swish; fewer memory accesses than the composed one.
// Agrees with hswish_naive everywhere, exactly 0 below -3 and x above +3.
inline float hswish_piecewise(float x) {
    if (x <= -3.0f) return 0.0f;
    if (x >= 3.0f) return x;
    return x * (x + 3.0f) / 6.0f;
}

inline float apply_scalar(Activation a, float x) {
    switch (a) {
        case Activation::Identity: return x;
        case Activation::ReLU: return relu(x);
        case Activation::ReLU6: return relu6(x);
        case Activation::Sigmoid: return sigmoid(x);
        case Activation::HardSigmoid: return hard_sigmoid(x);
        case Activation::Swish: return swish(x);
        case Activation::HSwish: return hswish_piecewise(x);
    }
    throw std::invalid_argument("unknown activation");
}

inline Tensor apply(Activation a, Tensor x) {
    if (a == Activation::Identity) return x;
    for (float& v : x.data) v = apply_scalar(a, v);
    return x;
}

// Composed-form h-swish over a tensor, kept for differential testing against
// the piecewise default.
inline Tensor apply_naive_hswish(Tensor x) {
    for (float& v : x.data) v = hswish_naive(v);
    return x;
}

inline Tensor apply_piecewise_hswish(Tensor x) {
    for (float& v : x.data) v = hswish_piecewise(v);
    return x;
}

}  // namespace mnf
