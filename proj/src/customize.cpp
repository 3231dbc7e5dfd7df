#include "cvid/customize.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cvid {

void TrainConfig::validate() const {
    if (iterations < 1) throw std::domain_error("TrainConfig: iterations must be >= 1");
    if (!(learning_rate > 0.0)) throw std::domain_error("TrainConfig: learning rate must be > 0");
    if (batch_timesteps < 1) throw std::domain_error("TrainConfig: batch timesteps must be >= 1");
    if (optimizer != "adam" && optimizer != "sgd")
        throw std::domain_error("TrainConfig: optimizer must be adam or sgd");
}

double eq1_loss(const Tensor& eps, const Tensor& eps_pred) {
    require_same_shape(eps, eps_pred, "eq1_loss");
    double s = 0.0;
    for (int64_t i = 0; i < eps.numel(); ++i) {
        double d = eps[i] - eps_pred[i];
        s += d * d;
    }
    return s / (double)eps.numel();
}

namespace {

class Sgd final : public Optimizer {
  public:
    explicit Sgd(double lr) : lr_(lr) {}
    void step(ParamSet& ps) override {
        for (auto& up : ps.items) {
            Param& p = *up;
            if (!p.trainable) continue;
            for (int64_t i = 0; i < p.value.numel(); ++i) p.value.data[i] -= lr_ * p.grad.data[i];
        }
    }

  private:
    double lr_;
};

class Adam final : public Optimizer {
  public:
    explicit Adam(double lr) : lr_(lr) {}
    void step(ParamSet& ps) override {
        ++t_;
        double c1 = 1.0 - std::pow(b1_, (double)t_);
        double c2 = 1.0 - std::pow(b2_, (double)t_);
        for (auto& up : ps.items) {
            Param& p = *up;
            if (!p.trainable) continue;
            auto& st = state_[p.name];
            if (st.m.empty()) {
                st.m.assign(p.value.data.size(), 0.0);
                st.v.assign(p.value.data.size(), 0.0);
            }
            for (int64_t i = 0; i < p.value.numel(); ++i) {
                double g = p.grad.data[i];
                st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * g;
                st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * g * g;
                p.value.data[i] -= lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
            }
        }
    }

  private:
    struct State {
        std::vector<double> m, v;
    };
    double lr_, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
    std::map<std::string, State> state_;
};

bool contains(const std::string& s, const std::string& sub) {
    return s.find(sub) != std::string::npos;
}

}  // namespace

std::unique_ptr<Optimizer> make_optimizer(const std::string& name, double lr) {
    if (name == "sgd") return std::make_unique<Sgd>(lr);
    if (name == "adam") return std::make_unique<Adam>(lr);
    throw std::domain_error("unknown optimizer: " + name);
}

void apply_trainable_flags(ParamSet& ps, const TrainConfig& cfg) {
    for (auto& up : ps.items) {
        Param& p = *up;
        const std::string& n = p.name;
        if (n.rfind("guide.", 0) == 0) {
            bool tuned_part = contains(n, ".temporal.") || contains(n, ".out.");
            p.trainable = cfg.train_guide_full || (cfg.train_guide_temporal && tuned_part);
        } else if (contains(n, ".lora.")) {
            p.trainable = cfg.train_lora;
        } else if (n == "custom_token") {
            p.trainable = cfg.train_token_embedding;
        } else {
            p.trainable = false;
        }
    }
}

Customizer::Customizer(StructureGuide& guide, const NoiseSchedule& schedule,
                       const TrainConfig& cfg)
    : guide_(guide), den_(guide.denoiser()), sched_(schedule), cfg_(cfg) {
    cfg_.validate();
    opt_ = make_optimizer(cfg_.optimizer, cfg_.learning_rate);
    apply_trainable_flags(den_.params(), cfg_);
}

double Customizer::eval(const VideoLatent& z0, const PromptEmbedding& prompt,
                        const ControlSequence& ctrl, int t, const Tensor& eps, bool backprop) {
    VideoLatent z_t = q_sample(z0, t, eps, sched_);
    Graph g(backprop);
    int zt = g.leaf(tokens_from_latent(z_t.data));
    std::vector<int> res = guide_.build_residuals(g, ctrl, zt, t, prompt);
    Denoiser::BuildSpec bs;
    bs.t = t;
    bs.prompt = &prompt;
    bs.residuals = &res;
    int ep = den_.build_eps(g, zt, bs);
    int l = g.mse(ep, g.leaf(tokens_from_latent(eps)));
    double lv = g.value(l).data[0];
    if (backprop) {
        g.backward(l);
        g.accumulate_param_grads();
    }
    return lv;
}

double Customizer::loss_for(const VideoLatent& z0, const PromptEmbedding& prompt,
                            const ControlSequence& ctrl, int t, const Tensor& eps) {
    return eval(z0, prompt, ctrl, t, eps, false);
}

double Customizer::train_step(const VideoLatent& z0, const PromptEmbedding& prompt,
                              const ControlSequence& ctrl, Rng& rng) {
    ParamSet& ps = den_.params();
    ps.zero_grads();
    double loss = 0.0;
    int last_t = 0;
    for (int b = 0; b < cfg_.batch_timesteps; ++b) {
        int t = rng.uniform_int(1, sched_.total_steps);
        Tensor eps = rng.randn(z0.data.shape);
        last_t = t;
        loss += eval(z0, prompt, ctrl, t, eps, true);
    }
    loss /= (double)cfg_.batch_timesteps;
    if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "train_step: non-finite loss " << loss << " at t=" << last_t
           << "; aborting before the update";
        throw std::runtime_error(os.str());
    }
    if (cfg_.batch_timesteps > 1) {
        double inv = 1.0 / (double)cfg_.batch_timesteps;
        for (auto& up : ps.items)
            if (up->trainable)
                for (double& gv : up->grad.data) gv *= inv;
    }
    opt_->step(ps);
    return loss;
}

CustomizeResult Customizer::customize(const Tensor& frames, const PromptEmbedding& prompt,
                                      const ControlSequence& ctrl) {
    const DenoiserConfig& dc = den_.config();
    if (frames.ndim() != 4 || frames.dim(0) != dc.frames)
        throw std::domain_error("customize: frame count disagrees with the model config");
    if (frames.dim(1) != 3 || frames.dim(2) != dc.pixel_h() || frames.dim(3) != dc.pixel_w())
        throw std::domain_error("customize: pixel dims disagree with the model config");
    validate_control(ctrl, dc);

    ParamSet& ps = den_.params();
    apply_trainable_flags(ps, cfg_);
    if (cfg_.base_word_id >= 0) {
        if (cfg_.base_word_id >= dc.vocab)
            throw std::domain_error("customize: base word id out of vocab");
        const Tensor& table = ps.at("token_table").value;
        Tensor& tok = ps.at("custom_token").value;
        for (int64_t j = 0; j < dc.prompt_dim; ++j)
            tok.data[j] = table.data[cfg_.base_word_id * dc.prompt_dim + j];
    }

    VideoLatent z0;
    z0.data = den_.encode(frames);
    z0.t = 0;

    std::ofstream log;
    if (!cfg_.log_path.empty()) {
        bool fresh = !std::filesystem::exists(cfg_.log_path) ||
                     std::filesystem::file_size(cfg_.log_path) == 0;
        log.open(cfg_.log_path, std::ios::app);
        if (!log) throw std::runtime_error("customize: cannot open log " + cfg_.log_path);
        if (fresh) log << "iteration,loss,wall_time_s\n";
    }

    Rng rng(cfg_.seed);
    CustomizeResult result;
    result.losses.reserve(cfg_.iterations);
    double initial = 0.0;
    int runaway = 0;
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < cfg_.iterations; ++i) {
        double loss = train_step(z0, prompt, ctrl, rng);
        result.losses.push_back(loss);
        if (i == 0) initial = loss;
        if (i > 0 && loss > 10.0 * initial) {
            if (++runaway >= 10) {
                std::ostringstream os;
                os << "customize: diverged, loss " << loss << " > 10x initial " << initial
                   << " for 10 consecutive steps at iteration " << i;
                throw std::runtime_error(os.str());
            }
        } else {
            runaway = 0;
        }
        if (log.is_open()) {
            double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log << i << "," << loss << "," << el << "\n";
        }
    }

    int fifth = std::max(1, cfg_.iterations / 5);
    double a = 0.0, b = 0.0;
    for (int i = 0; i < fifth; ++i) a += result.losses[i];
    for (int i = cfg_.iterations - fifth; i < cfg_.iterations; ++i) b += result.losses[i];
    result.first_fifth_mean = a / fifth;
    result.last_fifth_mean = b / fifth;
    result.checkpoint = make_checkpoint(ps);
    return result;
}

}  // namespace cvid
