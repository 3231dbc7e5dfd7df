#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cvid/archive.hpp"
#include "cvid/schedule.hpp"
#include "cvid/structure_guide.hpp"

namespace cvid {

struct TrainConfig {
    int iterations = 100;
    double learning_rate = 3e-5;
    int batch_timesteps = 1;
    uint64_t seed = 0;
    bool train_lora = true;
    bool train_token_embedding = true;
    bool train_guide_temporal = true;
    bool train_guide_full = false;  // open up the whole guide branch
    std::string optimizer = "adam";  // adam | sgd
    std::string log_path;            // append-only CSV when nonempty
    int64_t base_word_id = -1;       // custom token starts from this table row

    void validate() const;
};

// Training objective: mean squared error between the drawn and predicted noise
double eq1_loss(const Tensor& eps, const Tensor& eps_pred);

class Optimizer {
  public:
    virtual ~Optimizer() = default;
    virtual void step(ParamSet& ps) = 0;
};

std::unique_ptr<Optimizer> make_optimizer(const std::string& name, double lr);

// Resets every trainable flag from the config's trainable-set switches
void apply_trainable_flags(ParamSet& ps, const TrainConfig& cfg);

struct CustomizeResult {
    std::vector<double> losses;
    double first_fifth_mean = 0.0;
    double last_fifth_mean = 0.0;
    Archive checkpoint;
};

class Customizer {
  public:
    Customizer(StructureGuide& guide, const NoiseSchedule& schedule, const TrainConfig& cfg);

    const TrainConfig& config() const { return cfg_; }

    // Pure loss evaluation for a pinned (t, eps) draw; no side effects.
    double loss_for(const VideoLatent& z0, const PromptEmbedding& prompt,
                    const ControlSequence& ctrl, int t, const Tensor& eps);

    // Draws t ~ U(1,T) then eps ~ N(0,I) per batch timestep, applies one
    // optimizer update to the trainables, returns the mean loss.
    double train_step(const VideoLatent& z0, const PromptEmbedding& prompt,
                      const ControlSequence& ctrl, Rng& rng);

    // Full loop over encoded pixel frames; returns per-step losses and the
    // trainables-only checkpoint.
    CustomizeResult customize(const Tensor& frames, const PromptEmbedding& prompt,
                              const ControlSequence& ctrl);

  private:
    double eval(const VideoLatent& z0, const PromptEmbedding& prompt, const ControlSequence& ctrl,
                int t, const Tensor& eps, bool backprop);

    StructureGuide& guide_;
    Denoiser& den_;
    const NoiseSchedule& sched_;
    TrainConfig cfg_;
    std::unique_ptr<Optimizer> opt_;
};

}  // namespace cvid
