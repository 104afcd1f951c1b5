#pragma once

// Data-collection MDP over the 16 collection states and the deep Q-network
// that searches it for the plan minimizing cross-condition similarity.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdl/network.hpp"
#include "hdl/optim.hpp"
#include "hdl/similarity.hpp"

namespace hdl {

/// Per-pixel mean over conditions (label-free view) or the first condition's sample.
inline Tensor observe(const PreprocessedDataset& ds, std::size_t state_pos, bool condition_average = true) {
    if (state_pos >= ds.n()) throw std::out_of_range("observe: state position " + std::to_string(state_pos));
    if (!condition_average) return ds.at(state_pos, 0, 0);
    const Tensor& first = ds.at(state_pos, 0, 0);
    std::vector<double> acc(first.numel(), 0.0);
    for (std::size_t c = 0; c < kConditionCount; ++c)
        for (std::size_t k = 0; k < ds.shots; ++k) {
            auto d = ds.at(state_pos, c, k).data();
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
        }
    const double inv = 1.0 / static_cast<double>(kConditionCount * ds.shots);
    std::vector<float> v(acc.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(acc[i] * inv);
    return Tensor(first.shape(), std::move(v));
}

// Everything the agent can query, indexed by canonical state index.
struct CollectionEnv {
    std::vector<SimilarityMatrix> matrices;
    std::vector<Tensor> observations;

    RewardBreakdown score(std::span<const CollectionState> visited) const {
        std::vector<SimilarityMatrix> picked;
        for (const auto& s : visited) picked.push_back(matrices.at(s.index()));
        return reward(picked);
    }
    const Tensor& observation(const CollectionState& s) const { return observations.at(s.index()); }
    // What the agent sees before its first collection of an episode: an
    // all-zero capture passed through the same standardization.
    Tensor empty;

    const Tensor& empty_observation() const { return empty; }
};

/// `ds` must hold all 16 states. Observations are resized to obs_h x obs_w.
inline CollectionEnv make_env(const PreprocessedDataset& ds, std::size_t obs_h = dsp::kTargetHeight,
                              std::size_t obs_w = dsp::kTargetWidth, const SsimOptions& ssim_opt = {}) {
    if (ds.n() != kStateCount) throw std::invalid_argument("make_env needs all 16 collection states");
    CollectionEnv env;
    env.matrices.resize(kStateCount);
    env.observations.resize(kStateCount);
    const auto mats = cross_condition_matrices(ds, ssim_opt);
    for (std::size_t z = 0; z < ds.n(); ++z) {
        const std::size_t idx = ds.states[z].index();
        env.matrices[idx] = mats[z];
        Tensor obs = observe(ds, z, true);
        if (obs.dim(1) != obs_h || obs.dim(2) != obs_w) obs = dsp::resize_bilinear(obs, obs_h, obs_w);
        env.observations[idx] = obs;
    }
    // Standardize every pixel across the 16 states: the condition-averaged
    // views differ only subtly and the network must tell them apart.
    const std::size_t m = env.observations[0].numel();
    std::vector<double> mu(m, 0.0), var(m, 0.0);
    for (const auto& o : env.observations)
        for (std::size_t i = 0; i < m; ++i) mu[i] += o.at(i) / static_cast<double>(kStateCount);
    for (const auto& o : env.observations)
        for (std::size_t i = 0; i < m; ++i) var[i] += std::pow(o.at(i) - mu[i], 2) / static_cast<double>(kStateCount);
    const auto standardize = [&](const Tensor& o) {
        std::vector<float> v(m);
        for (std::size_t i = 0; i < m; ++i) v[i] = static_cast<float>((o.at(i) - mu[i]) / (std::sqrt(var[i]) + 1e-3));
        return Tensor(o.shape(), std::move(v));
    };
    env.empty = standardize(Tensor::zeros(env.observations[0].shape()));
    for (auto& o : env.observations) o = standardize(o);
    return env;
}

struct SweepEntry {
    CollectionState state;
    double mean_similarity = 0;
    double total_reward = 0;
};

/// Every single-state plan, ascending by mean cross-condition similarity.
inline std::vector<SweepEntry> exhaustive_sweep(const CollectionEnv& env) {
    std::vector<SweepEntry> out;
    for (const auto& s : enumerate_states()) {
        const CollectionState one[] = {s};
        out.push_back({s, env.matrices.at(s.index()).mean_off_diagonal(), env.score(one).total});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const SweepEntry& a, const SweepEntry& b) { return a.mean_similarity < b.mean_similarity; });
    return out;
}

/// Best total reward over all single- and two-state plans.
inline double exhaustive_best_small_plan(const CollectionEnv& env) {
    const auto states = enumerate_states();
    double best = -1e300;
    for (std::size_t a = 0; a < states.size(); ++a) {
        const CollectionState one[] = {states[a]};
        best = std::max(best, env.score(one).total);
        for (std::size_t b = 0; b < states.size(); ++b) {
            if (a == b) continue;
            const CollectionState two[] = {states[a], states[b]};
            best = std::max(best, env.score(two).total);
        }
    }
    return best;
}

struct Action {
    std::size_t location = 0;
    Modality modality = Modality::Image;

    CollectionState state() const { return CollectionState::from_location(location, modality); }
    static Action of(const CollectionState& s) { return {s.location(), s.modality}; }
};

// Distinct visited states; `steps[i]` is the breakdown after visiting i + 1 states.
struct EpisodeTrace {
    std::vector<CollectionState> visited;
    std::vector<RewardBreakdown> steps;
    bool terminal = false;

    double total() const { return steps.empty() ? 0.0 : steps.back().total; }
    bool contains(const CollectionState& s) const { return std::find(visited.begin(), visited.end(), s) != visited.end(); }
};

struct StepResult {
    EpisodeTrace trace;
    double reward_delta = 0;
    bool terminal = false;
};

/// Revisiting ends the episode with zero reward; a new state is appended and
/// earns the change in total reward of the visited set.
inline StepResult step(const CollectionEnv& env, const EpisodeTrace& episode, const Action& action) {
    if (episode.terminal) throw std::logic_error("step: episode already terminated");
    StepResult r{episode, 0.0, false};
    const CollectionState s = action.state();
    if (episode.contains(s)) {
        r.trace.terminal = r.terminal = true;
        return r;
    }
    r.trace.visited.push_back(s);
    r.trace.steps.push_back(env.score(r.trace.visited));
    r.reward_delta = r.trace.total() - episode.total();
    return r;
}

struct DqnConfig {
    std::size_t episodes = 100;
    double gamma = 0.9;
    double epsilon_start = 1.0;
    double epsilon_end = 0.05;
    std::size_t epsilon_decay_episodes = 60;
    std::size_t replay_capacity = 500;
    std::size_t batch_size = 16;
    std::size_t target_sync_episodes = 10;
    std::size_t step_cap = 16;
    std::size_t updates_per_step = 4;
    // The final episode, whose trace becomes the plan, follows the greedy policy.
    bool greedy_final_episode = true;
    RmsPropConfig rmsprop{};
    // Set to restrict the agent to one modality; the modality head is dropped.
    std::optional<Modality> single_modality;
};

inline double epsilon_at(const DqnConfig& cfg, std::size_t episode) {
    if (cfg.epsilon_decay_episodes == 0 || episode >= cfg.epsilon_decay_episodes) return cfg.epsilon_end;
    const double t = static_cast<double>(episode) / static_cast<double>(cfg.epsilon_decay_episodes);
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * t;
}

/// 5 x (conv3x3 stride 2 -> batchnorm -> relu), flatten, linear to 8 location
/// outputs plus 2 modality outputs (none when single-modality).
inline Network<float> make_q_network(std::size_t obs_h, std::size_t obs_w, bool two_modalities, std::uint64_t seed) {
    const std::size_t channels[] = {3, 8, 16, 16, 16, 16};
    std::vector<LayerSpec> specs;
    for (std::size_t b = 0; b < 5; ++b) {
        specs.push_back(LayerSpec::conv(channels[b], channels[b + 1], 3, 2, 1));
        specs.push_back(LayerSpec::batchnorm(channels[b + 1]));
        specs.push_back(LayerSpec::of(LayerKind::relu));
    }
    specs.push_back(LayerSpec::of(LayerKind::flatten));
    Shape shape{1, 3, obs_h, obs_w};
    for (const auto& s : specs) shape = s.output_shape(shape);
    specs.push_back(LayerSpec::dense(shape[1], kLocationCount + (two_modalities ? 2 : 0)));
    return Network<float>(std::move(specs), seed);
}

namespace detail {

inline std::size_t argmax(std::span<const float> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::vector<float> softmax_of(std::span<const float> v) {
    const float mx = *std::max_element(v.begin(), v.end());
    std::vector<float> out(v.size());
    float s = 0;
    for (std::size_t i = 0; i < v.size(); ++i) s += out[i] = std::exp(v[i] - mx);
    for (auto& x : out) x /= s;
    return out;
}

}  // namespace detail

/// Greedy action from the softmaxed heads, or a uniform random action with
/// probability epsilon. Raw outputs are the Q-values.
inline Action select_action(Network<float>& qnet, const Tensor& observation, double epsilon, std::mt19937_64& rng,
                            std::optional<Modality> single_modality = std::nullopt) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("select_action: epsilon outside [0, 1]");
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (epsilon > 0.0 && coin(rng) < epsilon) {
        Action a{rng() % kLocationCount, Modality::Image};
        a.modality = single_modality ? *single_modality : (rng() % 2 == 0 ? Modality::Image : Modality::Sound);
        return a;
    }
    qnet.set_training(false);
    const Tensor q = qnet.forward(observation.reshape({1, observation.dim(0), observation.dim(1), observation.dim(2)}));
    auto d = q.data();
    Action a;
    a.location = detail::argmax(detail::softmax_of(d.subspan(0, kLocationCount)));
    if (single_modality) {
        a.modality = *single_modality;
    } else {
        a.modality = detail::argmax(detail::softmax_of(d.subspan(kLocationCount, 2))) == 0 ? Modality::Image : Modality::Sound;
    }
    return a;
}

struct Transition {
    Tensor observation;
    Action action;
    float reward = 0;
    Tensor next_observation;
    bool terminal = false;
};

// Bounded FIFO; the oldest transition is overwritten when full.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
    }

    void push(Transition t) {
        if (items_.size() < capacity_) {
            items_.push_back(std::move(t));
        } else {
            items_[next_] = std::move(t);
        }
        next_ = (next_ + 1) % capacity_;
    }

    std::size_t size() const { return items_.size(); }
    std::size_t capacity() const { return capacity_; }

    // Uniform, without replacement within one batch.
    std::vector<const Transition*> sample(std::size_t count, std::mt19937_64& rng) const {
        if (count > items_.size()) throw std::invalid_argument("replay sample larger than buffer");
        std::vector<std::size_t> idx(items_.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::vector<std::size_t> picked;
        std::sample(idx.begin(), idx.end(), std::back_inserter(picked), count, rng);
        std::vector<const Transition*> out;
        for (auto i : picked) out.push_back(&items_[i]);
        return out;
    }

private:
    std::size_t capacity_;
    std::size_t next_ = 0;
    std::vector<Transition> items_;
};

/// One TD step on a replay batch; returns the loss. The bootstrap is
/// r + gamma * (1 - done) * max location Q' of the target network.
/// The location head learns only from transitions whose modality is the one
/// the target network prefers at that observation, so location values are
/// conditioned on the modality that will be chosen with them rather than
/// averaged over both. The modality head learns from every transition.
inline double td_update(Network<float>& qnet, Network<float>& target, RmsProp<float>& opt,
                        std::span<const Transition* const> batch, double gamma, bool two_modalities) {
    std::vector<Tensor> obs, next;
    for (const auto* t : batch) {
        obs.push_back(t->observation);
        next.push_back(t->next_observation);
    }
    const Tensor obs_batch = dsp::batch(obs);
    target.set_training(false);
    const Tensor q_next = target.forward(dsp::batch(next));
    const std::size_t heads = q_next.dim(1);
    std::vector<bool> on_modality(batch.size(), true);
    if (two_modalities) {
        const Tensor q_now = target.forward(obs_batch);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            auto row = q_now.data().subspan(i * heads, heads);
            const std::size_t preferred = row[kLocationCount + 1] > row[kLocationCount] ? 1 : 0;
            on_modality[i] = static_cast<std::size_t>(batch[i]->action.modality) == preferred;
        }
    }
    std::vector<float> y;
    std::vector<std::size_t> loc, mod;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto row = q_next.data().subspan(i * heads, heads);
        const double bootstrap = *std::max_element(row.begin(), row.begin() + kLocationCount);
        y.push_back(static_cast<float>(batch[i]->reward + (batch[i]->terminal ? 0.0 : gamma * bootstrap)));
        loc.push_back(batch[i]->action.location);
        mod.push_back(static_cast<std::size_t>(batch[i]->action.modality));
    }
    qnet.set_training(true);
    opt.zero_grad();
    const Tensor q = qnet.forward(obs_batch);
    // A target equal to the current prediction contributes no gradient.
    std::vector<float> y_loc = y;
    for (std::size_t i = 0; i < batch.size(); ++i)
        if (!on_modality[i]) y_loc[i] = q.data()[i * heads + loc[i]];
    Tensor loss = gathered_mse(slice_cols(q, 0, kLocationCount), std::span<const std::size_t>(loc), std::span<const float>(y_loc));
    if (two_modalities) {
        loss = add(loss, gathered_mse(slice_cols(q, kLocationCount, 2), std::span<const std::size_t>(mod), std::span<const float>(y)));
    }
    loss.backward();
    opt.step();
    return loss.item();
}

struct CollectionPlan {
    std::vector<CollectionState> states;
    std::uint64_t seed = 0;
    double reward = 0;
};

struct DqnResult {
    CollectionPlan plan;
    std::vector<double> reward_history;
    std::vector<EpisodeTrace> episodes;
    Network<float> qnet;
};

/// Each episode opens with an empty trace and the empty observation; the
/// previous episode's last state is only where the agent physically stands.
/// The final episode's trace is the plan.
inline DqnResult train_dqn(const CollectionEnv& env, std::uint64_t seed, const DqnConfig& cfg = {}) {
    if (env.observations.size() != kStateCount) throw std::invalid_argument("train_dqn: environment is not populated");
    const Tensor& probe = env.observations.front();
    const bool two = !cfg.single_modality.has_value();
    DqnResult out;
    out.qnet = make_q_network(probe.dim(1), probe.dim(2), two, detail::mix_seed({seed, 0xD0ULL}));
    Network<float> target = out.qnet.clone();
    RmsProp<float> opt(out.qnet.parameters(), cfg.rmsprop);
    ReplayBuffer replay(cfg.replay_capacity);
    std::mt19937_64 rng(detail::mix_seed({seed, 0xA6E47ULL}));

    for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
        const bool last = ep + 1 == cfg.episodes;
        const double eps = last && cfg.greedy_final_episode ? 0.0 : epsilon_at(cfg, ep);
        EpisodeTrace trace;
        Tensor obs = env.empty_observation();
        // Most recently collected state; the first step never terminates, so
        // it is set before it is read.
        CollectionState position;
        for (std::size_t t = 0; !trace.terminal; ++t) {
            const Action a = select_action(out.qnet, obs, eps, rng, cfg.single_modality);
            StepResult r = step(env, trace, a);
            if (!r.terminal) position = a.state();
            if (!r.terminal && r.trace.visited.size() >= cfg.step_cap) r.trace.terminal = r.terminal = true;
            Tensor next = env.observation(position);
            replay.push({obs, a, static_cast<float>(r.reward_delta), next, r.terminal});
            trace = std::move(r.trace);
            obs = next;
            if (replay.size() >= cfg.batch_size) {
                for (std::size_t u = 0; u < cfg.updates_per_step; ++u) {
                    const auto batch = replay.sample(cfg.batch_size, rng);
                    td_update(out.qnet, target, opt, batch, cfg.gamma, two);
                }
            }
            if (t > cfg.step_cap) throw std::logic_error("train_dqn: episode exceeded the step cap");
        }
        out.reward_history.push_back(trace.total());
        out.episodes.push_back(trace);
        if (cfg.target_sync_episodes > 0 && (ep + 1) % cfg.target_sync_episodes == 0) target.copy_from(out.qnet);
    }
    out.qnet.set_training(false);
    const auto& last = out.episodes.back();
    out.plan = {last.visited, seed, last.total()};
    return out;
}

inline nlohmann::json plan_to_json(const CollectionPlan& plan) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& s : plan.states) {
        entries.push_back({{"distance", s.distance == Distance::Near ? "near" : "far"},
                           {"angle", s.angle},
                           {"modality", s.modality == Modality::Image ? "image" : "sound"}});
    }
    return {{"plan", entries}, {"seed", plan.seed}, {"reward", plan.reward}};
}

/// Rejects empty plans, duplicate entries and unknown field values.
inline CollectionPlan plan_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("plan") || !j["plan"].is_array()) {
        throw std::invalid_argument("plan manifest needs a 'plan' array");
    }
    CollectionPlan p;
    for (const auto& e : j["plan"]) {
        const std::string dist = e.at("distance").get<std::string>();
        const std::string mod = e.at("modality").get<std::string>();
        const int angle = e.at("angle").get<int>();
        if ((dist != "near" && dist != "far") || (mod != "image" && mod != "sound") || angle < 0 || angle > 270 ||
            angle % 90 != 0) {
            throw std::invalid_argument("plan entry " + e.dump() + " is not a collection state");
        }
        CollectionState s{dist == "near" ? Distance::Near : Distance::Far, angle,
                          mod == "image" ? Modality::Image : Modality::Sound};
        if (std::find(p.states.begin(), p.states.end(), s) != p.states.end()) {
            throw std::invalid_argument("plan lists " + s.id() + " twice");
        }
        p.states.push_back(s);
    }
    if (p.states.empty()) throw std::invalid_argument("plan is empty");
    p.seed = j.value("seed", std::uint64_t{0});
    p.reward = j.value("reward", 0.0);
    return p;
}

inline void write_reward_csv(std::ostream& os, std::span<const double> history) {
    os << "episode,total_reward\n" << std::setprecision(10);
    for (std::size_t i = 0; i < history.size(); ++i) os << i << ',' << history[i] << '\n';
}

}  // namespace hdl
