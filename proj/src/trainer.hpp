#pragma once

// Shared Adam training loop over chat/statement examples. Next-token loss is
// computed only on mask-selected target positions; batches average example
// losses on a single tape. Deterministic given (params, data, options).

#include <vector>

#include "adapters.hpp"
#include "fact_world.hpp"
#include "transformer.hpp"

namespace cedit {

struct TrainOptions {
    int steps = 1000;  // budget; training may stop earlier at stop_loss
    int batch = 1;
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;
    // Convergence stop: halt once the mean loss over the last stop_window
    // steps falls below stop_loss (0 disables). Grinding a converged
    // objective only accumulates collateral drift.
    double stop_loss = 0.0;
    int stop_window = 20;
};

struct TrainResult {
    std::vector<std::pair<int, double>> curve;  // (step, batch loss)
    double final_loss = 0.0;
};

// One forward + masked next-token loss for a single example.
TensorF example_loss(const Transformer& model, const ChatExample& ex, TapeF* tape);

// Stepwise trainer so callers can interleave gate checks with optimization
// without disturbing Adam state or the shuffled example order.
class Trainer {
public:
    Trainer(Transformer& model, std::vector<TensorF*> params, std::vector<ChatExample> data,
            const TrainOptions& opts);
    double step();  // one optimizer step; returns the batch loss
    bool converged() const;  // stop_loss criterion met
    int steps_done() const { return steps_done_; }
    const TrainResult& result() const { return result_; }

private:
    Transformer& model_;
    std::vector<TensorF*> params_;
    std::vector<ChatExample> data_;
    TrainOptions opts_;
    AdamStateT<float> state_;
    AdamConfig adam_;
    Rng order_rng_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
    int steps_done_ = 0;
    TrainResult result_;
};

TrainResult train_examples(Transformer& model, const std::vector<TensorF*>& params,
                           const std::vector<ChatExample>& data, const TrainOptions& opts);

// Adapter training: base weights frozen (and hash-checked), only the injected
// adapter's parameters receive updates.
TrainResult train_adapter(Transformer& model, const InjectedAdapter& injected,
                          const std::vector<ChatExample>& data, const TrainOptions& opts);

void save_loss_curve(const std::string& path, const TrainResult& result);

}  // namespace cedit
