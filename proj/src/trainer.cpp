#include "trainer.hpp"

#include <cmath>
#include <sstream>

namespace cedit {

TensorF example_loss(const Transformer& model, const ChatExample& ex, TapeF* tape) {
    const size_t n = ex.tokens.size();
    if (n < 2) fail(ErrorKind::invalid_argument, "example too short for next-token loss");
    std::vector<int> inputs(ex.tokens.begin(), ex.tokens.end() - 1);
    std::vector<int> targets(ex.tokens.begin() + 1, ex.tokens.end());
    std::vector<uint8_t> mask(ex.loss_mask.begin() + 1, ex.loss_mask.end());
    TensorF logits = model.forward(inputs, tape);
    return cross_entropy(logits, targets, mask, tape);
}

Trainer::Trainer(Transformer& model, std::vector<TensorF*> params, std::vector<ChatExample> data,
                 const TrainOptions& opts)
    : model_(model),
      params_(std::move(params)),
      data_(std::move(data)),
      opts_(opts),
      order_rng_(Rng(opts.seed).fork(0xd47a)) {
    if (data_.empty()) fail(ErrorKind::invalid_argument, "training dataset is empty");
    if (opts_.batch < 1 || opts_.steps < 0) fail(ErrorKind::invalid_argument, "bad training budget");
    adam_.lr = opts_.lr;
    adam_.beta1 = opts_.beta1;
    adam_.beta2 = opts_.beta2;
    adam_.eps = opts_.adam_eps;
    order_.resize(data_.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    order_rng_.shuffle(order_);
}

double Trainer::step() {
    TapeF tape;
    TensorF total;
    for (int b = 0; b < opts_.batch; ++b) {
        if (cursor_ == order_.size()) {
            order_rng_.shuffle(order_);
            cursor_ = 0;
        }
        const ChatExample& ex = data_[order_[cursor_++]];
        TensorF loss = example_loss(model_, ex, &tape);
        total = b == 0 ? loss : add(total, loss, &tape);
    }
    if (opts_.batch > 1) total = scale_const(total, 1.0f / float(opts_.batch), &tape);
    const double loss_value = static_cast<double>(total.data()[0]);
    if (!std::isfinite(loss_value)) {
        fail(ErrorKind::divergence,
             "training diverged: non-finite loss at step " + std::to_string(steps_done_));
    }
    for (TensorF* p : params_) p->zero_grad();
    tape.backward(total);
    adam_step(params_, state_, adam_);
    result_.curve.emplace_back(steps_done_, loss_value);
    result_.final_loss = loss_value;
    steps_done_ += 1;
    return loss_value;
}

bool Trainer::converged() const {
    if (opts_.stop_loss <= 0.0 || steps_done_ < opts_.stop_window) return false;
    double acc = 0.0;
    for (int i = 0; i < opts_.stop_window; ++i) {
        acc += result_.curve[result_.curve.size() - 1 - size_t(i)].second;
    }
    return acc / opts_.stop_window < opts_.stop_loss;
}

TrainResult train_examples(Transformer& model, const std::vector<TensorF*>& params,
                           const std::vector<ChatExample>& data, const TrainOptions& opts) {
    if (opts.steps == 0) {
        if (data.empty()) fail(ErrorKind::invalid_argument, "training dataset is empty");
        return TrainResult{};
    }
    Trainer trainer(model, params, data, opts);
    for (int s = 0; s < opts.steps; ++s) {
        trainer.step();
        if (trainer.converged()) break;
    }
    return trainer.result();
}

TrainResult train_adapter(Transformer& model, const InjectedAdapter& injected,
                          const std::vector<ChatExample>& data, const TrainOptions& opts) {
    if (injected.params.empty()) {
        fail(ErrorKind::invalid_argument, "no adapter parameters to train");
    }
    const std::string base_hash = model.weights_hash();
    model.set_trainable(false);
    for (TensorF* p : injected.params) p->set_requires_grad(true);
    TrainResult result;
    try {
        result = train_examples(model, injected.params, data, opts);
    } catch (...) {
        model.set_trainable(true);
        throw;
    }
    model.set_trainable(true);
    if (model.weights_hash() != base_hash) {
        fail(ErrorKind::internal, "frozen-base contract violated during adapter training");
    }
    return result;
}

void save_loss_curve(const std::string& path, const TrainResult& result) {
    std::ostringstream out;
    out << "step,loss\n";
    for (const auto& [step, loss] : result.curve) out << step << "," << loss << "\n";
    write_text_file(path, out.str());
}

}  // namespace cedit
