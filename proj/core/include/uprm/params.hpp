#pragma once

#include <concepts>
#include <cstddef>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "uprm/tape.hpp"
#include "uprm/tensor.hpp"

namespace uprm {

// Parameter structs are templates over their leaf type: `Tensor2` for stored
// values, `Var` once bound to a tape. Each declares a static `fields` that
// names its members, which lets one traversal drive binding, gradient
// extraction, optimisation and checkpointing.

namespace detail {

template <class T>
concept Leaf = std::same_as<std::remove_cvref_t<T>, Tensor2> ||
               std::same_as<std::remove_cvref_t<T>, Var>;

template <class T>
struct is_vector : std::false_type {};
template <class T, class A>
struct is_vector<std::vector<T, A>> : std::true_type {};

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace detail

/// Visits corresponding leaves of one or more parameter structs of the same
/// shape, calling `f(name, leaf0, leaf1, ...)` in declaration order.
/// Non-const vector members of trailing arguments are resized to match the
/// first argument.
template <class F, class First, class... Rest>
void walk(const std::string& prefix, F&& f, First& first, Rest&... rest) {
  using U = std::remove_cvref_t<First>;
  if constexpr (detail::Leaf<U>) {
    f(prefix, first, rest...);
  } else if constexpr (detail::is_vector<U>::value) {
    (
        [&] {
          if constexpr (!std::is_const_v<Rest>) rest.resize(first.size());
        }(),
        ...);
    for (std::size_t i = 0; i < first.size(); ++i)
      walk(detail::join(prefix, std::to_string(i)), f, first[i], rest[i]...);
  } else {
    U::fields(
        [&](const char* name, auto&... sub) { walk(detail::join(prefix, name), f, sub...); },
        first, rest...);
  }
}

/// Registers every stored tensor as a gradient-receiving leaf.
template <template <class> class P>
P<Var> bind(Tape& tape, const P<Tensor2>& params) {
  P<Var> out;
  walk("", [&](const std::string&, const Tensor2& v, Var& var) { var = tape.parameter(v); },
       params, out);
  return out;
}

/// Gradients of a bound struct after `Tape::backward`.
template <template <class> class P>
P<Tensor2> gradients(const Tape& tape, const P<Var>& bound) {
  P<Tensor2> out;
  walk("", [&](const std::string&, const Var& var, Tensor2& g) { g = tape.grad(var); }, bound,
       out);
  return out;
}

template <template <class> class P>
std::size_t parameter_count(const P<Tensor2>& params) {
  std::size_t n = 0;
  walk("", [&](const std::string&, const Tensor2& v) { n += v.size(); }, params);
  return n;
}

/// Scaled-uniform initialisation in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor2 init_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

}  // namespace uprm
