#ifndef ARBOR_TAPE_HPP_
#define ARBOR_TAPE_HPP_

#include <functional>
#include <string>
#include <vector>

#include "arbor/tensor.hpp"

namespace arbor {

// A learnable tensor with a persistent gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Shape s) : name(std::move(n)), value(s), grad(std::move(s)) {}

  void zero_grad() { grad.zero(); }
};

// Reverse-mode tape. Operations record forward values plus a closure that
// scatters the output gradient back to the inputs; backward() walks the node
// list in reverse creation order (a topological order by construction).
//
// Gradients accumulate: repeated backward() calls without zero_grad add up,
// which is what the multi-term tree losses rely on.
template <typename T>
class Tape {
 public:
  using Id = int32_t;

  Tape();

  // Leaves.
  Id input(Tensor<T> t);           // constant, no gradient
  Id param(Param<T>& p);           // tracked leaf, backward adds into p.grad

  // Differentiable primitives.
  Id matmul(Id a, Id b);           // batched; rank-2 rhs broadcasts over batch
  Id add(Id a, Id b);              // numpy-style broadcasting
  Id mul(Id a, Id b);              // elementwise, broadcasting
  Id scale(Id a, T s);
  Id sigmoid(Id a);
  Id silu(Id a);
  Id rmsnorm(Id a, Id gain, T eps);                  // over the last axis
  Id softmax_masked(Id logits, Tensor<T> key_mask);  // softmax over last axis
  Id transpose_last2(Id a);
  Id permute(Id a, std::vector<int> perm);
  Id reshape(Id a, Shape s);
  Id gather_rows(Id table, std::vector<int64_t> idx);
  Id reduce_sum(Id a);             // -> scalar [1]
  Id reduce_mean(Id a);            // -> scalar [1]
  // Mean of elementwise binary cross entropy over cells where mask > 0;
  // probabilities are clamped to [1e-7, 1 - 1e-7].
  Id bce_masked(Id probs, Tensor<T> target, Tensor<T> mask);
  // Custom elementwise op; df receives the input value. Used by the gradient
  // checker's sensitivity harness and available for one-off activations.
  Id apply_unary(Id a, std::function<T(T)> f, std::function<T(T)> df);

  const Tensor<T>& val(Id id) const { return nodes_[id].out; }
  // Gradient of the last backward target w.r.t. this node (zero tensor if
  // the node was not reached).
  const Tensor<T>& grad_of(Id id) const;

  void backward(Id loss);

  size_t num_nodes() const { return nodes_.size(); }

  // When on, every op verifies its output is finite and throws NumericError
  // otherwise. Seeded from the ARBOR_DEBUG_NUMERICS environment variable.
  bool check_finite = false;

 private:
  struct Node {
    Tensor<T> out;
    Tensor<T> grad;
    bool needs_grad = false;
    bool grad_live = false;
    std::function<void()> back;
    const char* op = "";
  };

  Id push(Node n, const char* op);
  Tensor<T>& grad_buf(Id id);
  bool wants(Id id) const { return nodes_[id].needs_grad; }
  void add_grad(Id id, const Tensor<T>& g);

  std::vector<Node> nodes_;
  Tensor<T> empty_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace arbor

#endif  // ARBOR_TAPE_HPP_
