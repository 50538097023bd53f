#ifndef MATRREC_TAPE_HPP
#define MATRREC_TAPE_HPP

#include <algorithm>
#include <unordered_set>

#include "matrrec/tensor.hpp"

namespace matrrec {

/// Ordered record of the tracked primitive applications that produced a value.
/// Nodes are stored inputs-first; backward replays them in reverse.
template <typename T>
class Tape {
public:
    static Tape record(const Tensor<T>& root) {
        Tape tape;
        if (!root.requires_grad()) return tape;
        std::unordered_set<const Node<T>*> seen;
        std::vector<Node<T>*> stack{root.node().get()};
        seen.insert(root.node().get());
        while (!stack.empty()) {
            Node<T>* n = stack.back();
            stack.pop_back();
            tape.nodes_.push_back(n);
            for (const auto& in : n->inputs) {
                if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
            }
        }
        std::sort(tape.nodes_.begin(), tape.nodes_.end(),
                  [](const Node<T>* a, const Node<T>* b) { return a->serial < b->serial; });
        return tape;
    }

    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node<T>*>& nodes() const { return nodes_; }

    /// Bytes held by recorded values (activations and tracked leaves).
    std::size_t value_bytes() const {
        std::size_t total = 0;
        for (const auto* n : nodes_) total += n->value.size() * sizeof(T);
        return total;
    }

    /// Seeds d(root)/d(root) = 1 and runs every backward rule once, consumers first.
    /// Returns the number of rules visited.
    std::size_t run_backward() {
        if (nodes_.empty()) return 0;
        Node<T>* root = nodes_.back();
        T* g = root->grad_buffer();
        std::fill(g, g + root->value.size(), T{1});
        std::size_t visited = 0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward_rule) n->backward_rule(*n);
            ++visited;
        }
        return visited;
    }

private:
    std::vector<Node<T>*> nodes_;
};

/// Reverse-mode pass from a scalar loss. Gradients accumulate into every
/// tracked tensor reachable from `loss`; leaves keep them until zero_grad().
template <typename T>
Tape<T> backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) throw ContractError("backward: loss is not on the tape");
    auto tape = Tape<T>::record(loss);
    tape.run_backward();
    return tape;
}

}  // namespace matrrec

#endif  // MATRREC_TAPE_HPP
