#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dropgen/rng.hpp"
#include "dropgen/tensor.hpp"

namespace dropgen {

using json = nlohmann::json;

// Mode errors are distinct from contract violations: the call is well-formed
// but the spec's emission mode does not support exact enumeration.
struct unsupported_mode_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised by oracles when a spec violates one of the structural assumptions;
// names the assumption and carries the witness quantity.
struct assumption_error : std::runtime_error {
    explicit assumption_error(const std::string& which, const std::string& detail)
        : std::runtime_error(which + " violated: " + detail), assumption(which) {}
    std::string assumption;
};

enum class EmissionMode { discrete, gaussian };

// Stochastic emission block for discrete mode: class-conditional distribution
// over a finite set of channel-value patterns. Rows of `map` index classes,
// columns index patterns; `patterns[a]` holds the channel values pattern a
// decodes to.
struct DiscreteBlock {
    std::vector<std::vector<double>> map;       // K x A, row-stochastic
    std::vector<std::vector<double>> patterns;  // A x channels

    int alphabet() const { return static_cast<int>(patterns.size()); }
    int channels() const {
        return patterns.empty() ? 0 : static_cast<int>(patterns.front().size());
    }

    void validate(int num_classes, const std::string& what) const {
        check(!patterns.empty(), what + ": needs at least one pattern");
        const size_t ch = patterns.front().size();
        check(ch > 0, what + ": patterns need at least one channel");
        for (const auto& p : patterns) {
            check(p.size() == ch, what + ": ragged pattern table");
            for (double v : p) check(std::isfinite(v), what + ": non-finite pattern value");
        }
        for (size_t a = 0; a < patterns.size(); ++a)
            for (size_t b = a + 1; b < patterns.size(); ++b)
                check(patterns[a] != patterns[b], what + ": patterns must be distinct");
        check(static_cast<int>(map.size()) == num_classes,
              what + ": map must have one row per class");
        for (const auto& row : map) {
            check(row.size() == patterns.size(), what + ": map column count mismatch");
            double s = 0.0;
            for (double p : row) {
                check(p >= 0.0, what + ": negative probability");
                s += p;
            }
            check(std::abs(s - 1.0) < 1e-9, what + ": map rows must sum to 1");
        }
    }
};

struct GaussianBlock {
    std::vector<std::vector<double>> means;  // K x channels
    double sigma = 0.1;

    int channels() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }

    void validate(int num_classes, const std::string& what) const {
        check(static_cast<int>(means.size()) == num_classes,
              what + ": means must have one row per class");
        const size_t ch = means.front().size();
        check(ch > 0, what + ": needs at least one channel");
        for (const auto& row : means) check(row.size() == ch, what + ": ragged mean table");
        check(sigma > 0.0, what + ": sigma must be positive");
    }
};

// Parameters of the generative graphical model: the label prior, the
// environment-independent stable emission, and per-environment unstable
// emissions. Positions along the signal are i.i.d.
//
// Discrete mode optionally routes both emissions through a shared noisy
// template T: Y -> T (template_map), then T -> X_s and (T, E) -> X_u. An
// empty template_map reads both emissions from Y directly. The chain keeps
// the environment's influence confined to X_u while letting the unstable
// channel subsume the stable one's information in-domain.
struct EnvironmentSpec {
    int schema_version = 1;
    std::string name;
    EmissionMode mode = EmissionMode::discrete;
    int num_classes = 2;
    int length = 16;
    std::vector<double> label_prior;
    std::vector<std::string> train_envs;
    std::vector<std::string> test_envs;

    // discrete mode
    std::vector<std::vector<double>> template_map;  // optional K x K chain, Y -> T
    DiscreteBlock stable;
    std::vector<std::vector<double>> unstable_patterns;               // A_u x n_u
    std::map<std::string, std::vector<std::vector<double>>> unstable_maps;  // env -> K x A_u
    // Test hook: lets a spec's stable emission secretly depend on the
    // environment, so assumption checkers have something real to catch.
    std::map<std::string, std::vector<std::vector<double>>> stable_map_overrides;

    // gaussian mode
    GaussianBlock stable_gauss;
    std::map<std::string, GaussianBlock> unstable_gauss;

    int n_s() const {
        return mode == EmissionMode::discrete ? stable.channels() : stable_gauss.channels();
    }
    int n_u() const {
        if (mode == EmissionMode::discrete)
            return unstable_patterns.empty() ? 0
                                             : static_cast<int>(unstable_patterns.front().size());
        return unstable_gauss.empty() ? 0 : unstable_gauss.begin()->second.channels();
    }

    std::vector<std::string> all_envs() const {
        std::vector<std::string> envs = train_envs;
        envs.insert(envs.end(), test_envs.begin(), test_envs.end());
        return envs;
    }

    bool has_env(const std::string& env) const {
        const auto envs = all_envs();
        return std::find(envs.begin(), envs.end(), env) != envs.end();
    }

    const std::vector<std::vector<double>>& stable_map_for(const std::string& env) const {
        auto it = stable_map_overrides.find(env);
        return it == stable_map_overrides.end() ? stable.map : it->second;
    }

    void validate() const {
        check(num_classes >= 2, "spec needs at least two classes");
        check(length >= 2, "spec needs length >= 2");
        check(static_cast<int>(label_prior.size()) == num_classes,
              "label prior size mismatch");
        double s = 0.0;
        for (double p : label_prior) {
            check(p >= 0.0, "label prior entries must be non-negative");
            s += p;
        }
        check(std::abs(s - 1.0) < 1e-9, "label prior must sum to 1");
        check(!train_envs.empty(), "spec needs at least one training environment");
        for (const auto& t : test_envs)
            check(std::find(train_envs.begin(), train_envs.end(), t) == train_envs.end(),
                  "test environments must be disjoint from training environments");
        {
            auto envs = all_envs();
            std::sort(envs.begin(), envs.end());
            check(std::adjacent_find(envs.begin(), envs.end()) == envs.end(),
                  "duplicate environment id");
        }
        if (mode == EmissionMode::discrete) {
            if (!template_map.empty()) {
                check(static_cast<int>(template_map.size()) == num_classes,
                      "template map must have one row per class");
                for (const auto& row : template_map) {
                    check(static_cast<int>(row.size()) == num_classes,
                          "template map must be K x K");
                    double rs = 0.0;
                    for (double p : row) {
                        check(p >= 0.0, "template map entries must be non-negative");
                        rs += p;
                    }
                    check(std::abs(rs - 1.0) < 1e-9, "template map rows must sum to 1");
                }
            }
            stable.validate(num_classes, "stable block");
            check(!unstable_patterns.empty(), "unstable block: needs patterns");
            for (const auto& env : all_envs()) {
                auto it = unstable_maps.find(env);
                check(it != unstable_maps.end(), "missing unstable map for env " + env);
                DiscreteBlock b{it->second, unstable_patterns};
                b.validate(num_classes, "unstable block (" + env + ")");
            }
            for (const auto& [env, m] : stable_map_overrides) {
                check(has_env(env), "stable override names unknown env " + env);
                DiscreteBlock b{m, stable.patterns};
                b.validate(num_classes, "stable override (" + env + ")");
            }
            const long cells = static_cast<long>(num_classes) * stable.alphabet() *
                               static_cast<long>(unstable_patterns.size());
            check(cells <= 1000000, "discrete joint table exceeds 10^6 cells");
        } else {
            stable_gauss.validate(num_classes, "stable gaussian block");
            for (const auto& env : all_envs()) {
                auto it = unstable_gauss.find(env);
                check(it != unstable_gauss.end(), "missing gaussian block for env " + env);
                it->second.validate(num_classes, "unstable gaussian block (" + env + ")");
                check(it->second.channels() == unstable_gauss.begin()->second.channels(),
                      "unstable channel count differs across envs");
            }
        }
    }

    json to_json() const {
        json j;
        j["schema_version"] = schema_version;
        j["name"] = name;
        j["mode"] = mode == EmissionMode::discrete ? "discrete" : "gaussian";
        j["num_classes"] = num_classes;
        j["length"] = length;
        j["label_prior"] = label_prior;
        j["environments"] = {{"train", train_envs}, {"test", test_envs}};
        if (mode == EmissionMode::discrete) {
            if (!template_map.empty()) j["template"] = {{"map", template_map}};
            j["stable"] = {{"patterns", stable.patterns}, {"map", stable.map}};
            json maps = json::object();
            for (const auto& [env, m] : unstable_maps) maps[env] = m;
            j["unstable"] = {{"patterns", unstable_patterns}, {"maps", maps}};
            if (!stable_map_overrides.empty()) {
                json ov = json::object();
                for (const auto& [env, m] : stable_map_overrides) ov[env] = m;
                j["stable_map_overrides"] = ov;
            }
        } else {
            j["stable"] = {{"means", stable_gauss.means}, {"sigma", stable_gauss.sigma}};
            json blocks = json::object();
            for (const auto& [env, b] : unstable_gauss)
                blocks[env] = {{"means", b.means}, {"sigma", b.sigma}};
            j["unstable"] = blocks;
        }
        return j;
    }

    static EnvironmentSpec from_json(const json& j);

    uint64_t hash() const;
};

// -- strict-schema helpers ---------------------------------------------------

inline void require_keys(const json& j, const std::vector<std::string>& allowed,
                         const std::string& context) {
    check(j.is_object(), context + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        check(std::find(allowed.begin(), allowed.end(), it.key()) != allowed.end(),
              context + ": unknown key '" + it.key() + "'");
}

inline uint64_t fnv1a(const std::string& bytes) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline EnvironmentSpec EnvironmentSpec::from_json(const json& j) {
    require_keys(j, {"schema_version", "name", "mode", "num_classes", "length", "label_prior",
                     "environments", "template", "stable", "unstable", "stable_map_overrides"},
                 "spec");
    EnvironmentSpec s;
    check(j.contains("schema_version"), "spec: missing schema_version");
    s.schema_version = j.at("schema_version").get<int>();
    check(s.schema_version == 1, "spec: unsupported schema_version");
    s.name = j.value("name", "");
    const std::string mode = j.at("mode").get<std::string>();
    check(mode == "discrete" || mode == "gaussian", "spec: mode must be discrete|gaussian");
    s.mode = mode == "discrete" ? EmissionMode::discrete : EmissionMode::gaussian;
    s.num_classes = j.at("num_classes").get<int>();
    s.length = j.at("length").get<int>();
    s.label_prior = j.at("label_prior").get<std::vector<double>>();
    require_keys(j.at("environments"), {"train", "test"}, "spec.environments");
    s.train_envs = j.at("environments").at("train").get<std::vector<std::string>>();
    s.test_envs = j.at("environments").value("test", std::vector<std::string>{});
    if (s.mode == EmissionMode::discrete) {
        if (j.contains("template")) {
            require_keys(j.at("template"), {"map"}, "spec.template");
            s.template_map = j.at("template").at("map").get<std::vector<std::vector<double>>>();
        }
        require_keys(j.at("stable"), {"patterns", "map"}, "spec.stable");
        s.stable.patterns = j.at("stable").at("patterns").get<std::vector<std::vector<double>>>();
        s.stable.map = j.at("stable").at("map").get<std::vector<std::vector<double>>>();
        require_keys(j.at("unstable"), {"patterns", "maps"}, "spec.unstable");
        s.unstable_patterns =
            j.at("unstable").at("patterns").get<std::vector<std::vector<double>>>();
        for (auto it = j.at("unstable").at("maps").begin(); it != j.at("unstable").at("maps").end();
             ++it)
            s.unstable_maps[it.key()] = it.value().get<std::vector<std::vector<double>>>();
        if (j.contains("stable_map_overrides"))
            for (auto it = j.at("stable_map_overrides").begin();
                 it != j.at("stable_map_overrides").end(); ++it)
                s.stable_map_overrides[it.key()] =
                    it.value().get<std::vector<std::vector<double>>>();
    } else {
        require_keys(j.at("stable"), {"means", "sigma"}, "spec.stable");
        s.stable_gauss.means = j.at("stable").at("means").get<std::vector<std::vector<double>>>();
        s.stable_gauss.sigma = j.at("stable").at("sigma").get<double>();
        for (auto it = j.at("unstable").begin(); it != j.at("unstable").end(); ++it) {
            require_keys(it.value(), {"means", "sigma"}, "spec.unstable." + it.key());
            GaussianBlock b;
            b.means = it.value().at("means").get<std::vector<std::vector<double>>>();
            b.sigma = it.value().at("sigma").get<double>();
            s.unstable_gauss[it.key()] = b;
        }
    }
    s.validate();
    return s;
}

inline uint64_t EnvironmentSpec::hash() const { return fnv1a(to_json().dump()); }

// -- datasets ----------------------------------------------------------------

struct Sample {
    Tensor x_u;   // [n_u, L]
    Tensor x_s;   // [n_s, L]
    IntTensor y;  // [L]
    std::string env;
};

struct Dataset {
    std::vector<Sample> samples;
    uint64_t spec_hash = 0;
    uint64_t seed = 0;
    int num_classes = 0;
    int n_u = 0;
    int n_s = 0;
    int length = 0;

    int size() const { return static_cast<int>(samples.size()); }
};

namespace detail {

inline int categorical(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

// One sample from P_env. Label and stable draws use streams keyed by
// `shared_key`; setting shared_key equal across environments yields paired
// samples that differ only in their unstable block.
inline Sample generate_sample(const EnvironmentSpec& spec, const std::string& env,
                              uint64_t seed, uint64_t index, uint64_t shared_key) {
    const uint64_t env_key = fnv1a(env);
    Rng label_rng = stream_rng(seed, StreamTag::label, shared_key, index);
    Rng stable_rng = stream_rng(seed, StreamTag::stable, shared_key, index);
    Rng unstable_rng = stream_rng(seed, StreamTag::unstable, env_key, index);

    Sample s;
    s.env = env;
    s.y = IntTensor({spec.length});
    s.x_u = Tensor({spec.n_u(), spec.length});
    s.x_s = Tensor({spec.n_s(), spec.length});
    for (int l = 0; l < spec.length; ++l) {
        const int y = categorical(spec.label_prior, label_rng);
        s.y[l] = y;
        if (spec.mode == EmissionMode::discrete) {
            // With a template chain both emissions read the shared T; the
            // template draw rides the label stream so paired sampling shares it.
            const int t = spec.template_map.empty()
                              ? y
                              : categorical(spec.template_map[static_cast<size_t>(y)], label_rng);
            const auto& smap = spec.stable_map_for(env);
            const int a = categorical(smap[static_cast<size_t>(t)], stable_rng);
            for (int c = 0; c < spec.n_s(); ++c)
                s.x_s(c, l) = spec.stable.patterns[static_cast<size_t>(a)][static_cast<size_t>(c)];
            const int u = categorical(
                spec.unstable_maps.at(env)[static_cast<size_t>(t)], unstable_rng);
            for (int c = 0; c < spec.n_u(); ++c)
                s.x_u(c, l) =
                    spec.unstable_patterns[static_cast<size_t>(u)][static_cast<size_t>(c)];
        } else {
            for (int c = 0; c < spec.n_s(); ++c)
                s.x_s(c, l) =
                    spec.stable_gauss.means[static_cast<size_t>(y)][static_cast<size_t>(c)] +
                    spec.stable_gauss.sigma * stable_rng.normal();
            const auto& block = spec.unstable_gauss.at(env);
            for (int c = 0; c < spec.n_u(); ++c)
                s.x_u(c, l) = block.means[static_cast<size_t>(y)][static_cast<size_t>(c)] +
                              block.sigma * unstable_rng.normal();
        }
    }
    return s;
}

}  // namespace detail

// n i.i.d. samples from P_env; sample i depends only on (spec, env, seed, i).
inline Dataset sample_dataset(const EnvironmentSpec& spec, const std::string& env, int n,
                              uint64_t seed) {
    spec.validate();
    check(spec.has_env(env), "unknown environment: " + env);
    check(n > 0, "sample count must be positive");
    Dataset d;
    d.spec_hash = spec.hash();
    d.seed = seed;
    d.num_classes = spec.num_classes;
    d.n_u = spec.n_u();
    d.n_s = spec.n_s();
    d.length = spec.length;
    const uint64_t env_key = fnv1a(env);
    d.samples.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        d.samples.push_back(
            detail::generate_sample(spec, env, seed, static_cast<uint64_t>(i), env_key));
    return d;
}

// Pooled training data: each sample's environment is drawn uniformly from
// `envs` (the training mixture), with the environment label retained.
inline Dataset sample_pooled(const EnvironmentSpec& spec, const std::vector<std::string>& envs,
                             int n, uint64_t seed) {
    spec.validate();
    check(!envs.empty(), "pooled sampling needs environments");
    for (const auto& e : envs) check(spec.has_env(e), "unknown environment: " + e);
    Dataset d;
    d.spec_hash = spec.hash();
    d.seed = seed;
    d.num_classes = spec.num_classes;
    d.n_u = spec.n_u();
    d.n_s = spec.n_s();
    d.length = spec.length;
    d.samples.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng pick = stream_rng(seed, StreamTag::misc, static_cast<uint64_t>(i));
        const auto& env = envs[pick.below(envs.size())];
        d.samples.push_back(detail::generate_sample(spec, env, seed, static_cast<uint64_t>(i),
                                                    fnv1a(env)));
    }
    return d;
}

// Paired datasets across two environments: sample i shares its label sequence
// and stable draws in both, so the pair differs only through the unstable
// block. Used by representation-stability diagnostics.
inline std::pair<Dataset, Dataset> sample_paired_datasets(const EnvironmentSpec& spec,
                                                          const std::string& env_a,
                                                          const std::string& env_b, int n,
                                                          uint64_t seed) {
    spec.validate();
    check(spec.has_env(env_a) && spec.has_env(env_b), "unknown environment");
    auto make = [&](const std::string& env) {
        Dataset d;
        d.spec_hash = spec.hash();
        d.seed = seed;
        d.num_classes = spec.num_classes;
        d.n_u = spec.n_u();
        d.n_s = spec.n_s();
        d.length = spec.length;
        for (int i = 0; i < n; ++i)
            d.samples.push_back(
                detail::generate_sample(spec, env, seed, static_cast<uint64_t>(i), 0));
        return d;
    };
    return {make(env_a), make(env_b)};
}

struct Batch {
    Tensor x_u;   // [B, n_u, L]
    Tensor x_s;   // [B, n_s, L]
    IntTensor y;  // [B, L]
};

inline Batch make_batch(const Dataset& d, const std::vector<int>& indices) {
    check(!indices.empty(), "batch needs at least one sample");
    const int b = static_cast<int>(indices.size());
    Batch out{Tensor({b, d.n_u, d.length}), Tensor({b, d.n_s, d.length}),
              IntTensor({b, d.length})};
    for (int i = 0; i < b; ++i) {
        const Sample& s = d.samples[static_cast<size_t>(indices[static_cast<size_t>(i)])];
        for (int c = 0; c < d.n_u; ++c)
            for (int l = 0; l < d.length; ++l) out.x_u(i, c, l) = s.x_u(c, l);
        for (int c = 0; c < d.n_s; ++c)
            for (int l = 0; l < d.length; ++l) out.x_s(i, c, l) = s.x_s(c, l);
        for (int l = 0; l < d.length; ++l) out.y(i, l) = s.y[l];
    }
    return out;
}

inline Batch full_batch(const Dataset& d) {
    std::vector<int> idx(static_cast<size_t>(d.size()));
    for (int i = 0; i < d.size(); ++i) idx[static_cast<size_t>(i)] = i;
    return make_batch(d, idx);
}

// -- exact probability tables ------------------------------------------------

// Joint distribution over named finite variables; the oracle substrate for
// entropies, mutual informations, and Bayes risks.
class ProbabilityTable {
public:
    ProbabilityTable(std::vector<std::string> names, std::vector<int> sizes,
                     std::string env_tag = "")
        : names_(std::move(names)), sizes_(std::move(sizes)), env_(std::move(env_tag)) {
        check(names_.size() == sizes_.size(), "table names/sizes mismatch");
        long n = 1;
        for (int s : sizes_) {
            check(s > 0, "table axis sizes must be positive");
            n *= s;
        }
        probs_.assign(static_cast<size_t>(n), 0.0);
    }

    const std::vector<std::string>& names() const { return names_; }
    const std::vector<int>& sizes() const { return sizes_; }
    const std::string& env() const { return env_; }
    long cells() const { return static_cast<long>(probs_.size()); }

    double& at(const std::vector<int>& idx) { return probs_[flat(idx)]; }
    double at(const std::vector<int>& idx) const { return probs_[flat(idx)]; }

    void validate() const {
        double s = 0.0;
        for (double p : probs_) {
            check(p >= -1e-15, "table probabilities must be non-negative");
            s += p;
        }
        check(std::abs(s - 1.0) < 1e-12, "table must sum to 1");
    }

    double total() const {
        double s = 0.0;
        for (double p : probs_) s += p;
        return s;
    }

    int axis_of(const std::string& name) const {
        for (size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return static_cast<int>(i);
        contract_fail("unknown variable: " + name);
    }

    // Marginal distribution over the given axes (in the given order).
    ProbabilityTable marginal(const std::vector<std::string>& vars) const {
        std::vector<int> axes;
        std::vector<int> sizes;
        for (const auto& v : vars) {
            axes.push_back(axis_of(v));
            sizes.push_back(sizes_[static_cast<size_t>(axes.back())]);
        }
        ProbabilityTable out(vars, sizes, env_);
        std::vector<int> idx(names_.size(), 0);
        for (long cell = 0; cell < cells(); ++cell) {
            unflatten(cell, idx);
            std::vector<int> sub(axes.size());
            for (size_t i = 0; i < axes.size(); ++i)
                sub[i] = idx[static_cast<size_t>(axes[i])];
            out.at(sub) += probs_[static_cast<size_t>(cell)];
        }
        return out;
    }

    // Joint entropy H(vars) in nats; zero-probability cells contribute 0.
    double entropy(const std::vector<std::string>& vars) const {
        ProbabilityTable m = marginal(vars);
        double h = 0.0;
        for (double p : m.probs_)
            if (p > 0.0) h -= p * std::log(p);
        return h;
    }

private:
    size_t flat(const std::vector<int>& idx) const {
        check(idx.size() == sizes_.size(), "table index rank mismatch");
        long f = 0;
        for (size_t i = 0; i < idx.size(); ++i) {
            check(idx[i] >= 0 && idx[i] < sizes_[i], "table index out of range");
            f = f * sizes_[i] + idx[i];
        }
        return static_cast<size_t>(f);
    }

    void unflatten(long cell, std::vector<int>& idx) const {
        for (int i = static_cast<int>(sizes_.size()) - 1; i >= 0; --i) {
            idx[static_cast<size_t>(i)] = static_cast<int>(cell % sizes_[static_cast<size_t>(i)]);
            cell /= sizes_[static_cast<size_t>(i)];
        }
    }

    std::vector<std::string> names_;
    std::vector<int> sizes_;
    std::string env_;
    std::vector<double> probs_;
};

// H(target | given) = H(target, given) - H(given)
inline double conditional_entropy(const ProbabilityTable& table, const std::string& target,
                                  std::vector<std::string> given) {
    table.axis_of(target);  // existence check
    for (const auto& g : given) table.axis_of(g);
    if (given.empty()) return table.entropy({target});
    std::vector<std::string> joint = given;
    joint.push_back(target);
    return table.entropy(joint) - table.entropy(given);
}

// I(a; b | given) = H(a | given) - H(a | b, given)
inline double mutual_information(const ProbabilityTable& table, const std::string& a,
                                 const std::string& b,
                                 std::vector<std::string> given = {}) {
    const double h_a = conditional_entropy(table, a, given);
    std::vector<std::string> with_b = given;
    with_b.push_back(b);
    return h_a - conditional_entropy(table, a, with_b);
}

// Exact per-position joint P_env(Y, X_s, X_u) by enumeration of the
// generative process. Discrete mode only.
inline ProbabilityTable enumerate_joint(const EnvironmentSpec& spec, const std::string& env) {
    spec.validate();
    check(spec.has_env(env), "unknown environment: " + env);
    if (spec.mode != EmissionMode::discrete)
        throw unsupported_mode_error("enumerate_joint requires discrete mode");
    const int k = spec.num_classes;
    const int a_s = spec.stable.alphabet();
    const int a_u = static_cast<int>(spec.unstable_patterns.size());
    ProbabilityTable table({"Y", "Xs", "Xu"}, {k, a_s, a_u}, env);
    const auto& smap = spec.stable_map_for(env);
    const auto& umap = spec.unstable_maps.at(env);
    for (int y = 0; y < k; ++y)
        for (int a = 0; a < a_s; ++a)
            for (int u = 0; u < a_u; ++u) {
                double p = 0.0;
                if (spec.template_map.empty()) {
                    p = smap[static_cast<size_t>(y)][static_cast<size_t>(a)] *
                        umap[static_cast<size_t>(y)][static_cast<size_t>(u)];
                } else {
                    for (int t = 0; t < k; ++t)
                        p += spec.template_map[static_cast<size_t>(y)][static_cast<size_t>(t)] *
                             smap[static_cast<size_t>(t)][static_cast<size_t>(a)] *
                             umap[static_cast<size_t>(t)][static_cast<size_t>(u)];
                }
                table.at({y, a, u}) = spec.label_prior[static_cast<size_t>(y)] * p;
            }
    table.validate();
    return table;
}

// -- assumption verification and Bayes risks ----------------------------------

struct AssumptionReport {
    bool a1 = false, a2 = false, a3 = false, a4 = false;
    double a1_max_tv = 0.0;   // witness: max_{e,e'} TV(P_e(Y|X_s), P_e'(Y|X_s))
    double a2_max_tv = 0.0;   // witness: max_{e,e'} TV(P_e(Y|X_u), P_e'(Y|X_u))
    double a3_min_mi = 0.0;   // witness: min_e I_e(Y; X_u | X_s)
    double a4_mi = 0.0;       // witness: I(Y; X_s)

    bool all_pass() const { return a1 && a2 && a3 && a4; }
    std::string first_failed() const {
        if (!a1) return "A1";
        if (!a2) return "A2";
        if (!a3) return "A3";
        if (!a4) return "A4";
        return "";
    }
};

namespace detail {

// max over values of x (with positive marginal in both) of
// TV(P_a(Y | x), P_b(Y | x)).
inline double max_conditional_tv(const ProbabilityTable& ta, const ProbabilityTable& tb,
                                 const std::string& var) {
    ProbabilityTable ja = ta.marginal({var, "Y"});
    ProbabilityTable jb = tb.marginal({var, "Y"});
    ProbabilityTable ma = ta.marginal({var});
    ProbabilityTable mb = tb.marginal({var});
    const int vals = ja.sizes()[0];
    const int k = ja.sizes()[1];
    double worst = 0.0;
    for (int v = 0; v < vals; ++v) {
        const double pa = ma.at({v}), pb = mb.at({v});
        if (pa <= 0.0 || pb <= 0.0) continue;
        double tv = 0.0;
        for (int y = 0; y < k; ++y)
            tv += std::abs(ja.at({v, y}) / pa - jb.at({v, y}) / pb);
        worst = std::max(worst, 0.5 * tv);
    }
    return worst;
}

}  // namespace detail

inline AssumptionReport verify_assumptions(const EnvironmentSpec& spec) {
    spec.validate();
    if (spec.mode != EmissionMode::discrete)
        throw unsupported_mode_error("verify_assumptions requires discrete mode");
    const auto envs = spec.all_envs();
    std::vector<ProbabilityTable> tables;
    tables.reserve(envs.size());
    for (const auto& e : envs) tables.push_back(enumerate_joint(spec, e));

    AssumptionReport rep;
    for (size_t i = 0; i < tables.size(); ++i)
        for (size_t j = i + 1; j < tables.size(); ++j) {
            rep.a1_max_tv = std::max(rep.a1_max_tv,
                                     detail::max_conditional_tv(tables[i], tables[j], "Xs"));
            rep.a2_max_tv = std::max(rep.a2_max_tv,
                                     detail::max_conditional_tv(tables[i], tables[j], "Xu"));
        }
    rep.a3_min_mi = 1e300;
    for (const auto& t : tables)
        rep.a3_min_mi = std::min(rep.a3_min_mi, mutual_information(t, "Y", "Xu", {"Xs"}));
    rep.a4_mi = mutual_information(tables.front(), "Y", "Xs");

    rep.a1 = rep.a1_max_tv < 1e-9;
    rep.a2 = rep.a2_max_tv > 1e-6;
    rep.a3 = rep.a3_min_mi > 1e-9;
    rep.a4 = rep.a4_mi > 1e-9;
    return rep;
}

struct BayesRisks {
    double h_y = 0.0;        // H(Y), nats
    double h_y_xs = 0.0;     // H(Y | X_s), environment-invariant
    std::vector<std::string> envs;
    std::vector<double> h_y_joint;  // per-env H_e(Y | X_s, X_u)
    std::vector<double> gap;        // per-env Delta_e = H(Y|X_s) - H_e(Y|X_s,X_u)
};

inline BayesRisks bayes_risks(const EnvironmentSpec& spec) {
    AssumptionReport rep = verify_assumptions(spec);
    if (!rep.all_pass()) {
        const std::string which = rep.first_failed();
        std::string detail;
        if (which == "A1") detail = "max TV " + std::to_string(rep.a1_max_tv);
        if (which == "A2") detail = "max TV " + std::to_string(rep.a2_max_tv);
        if (which == "A3") detail = "min I_e(Y;Xu|Xs) = " + std::to_string(rep.a3_min_mi);
        if (which == "A4") detail = "I(Y;Xs) = " + std::to_string(rep.a4_mi);
        throw assumption_error(which, detail);
    }
    BayesRisks out;
    out.envs = spec.all_envs();
    double first_h = 0.0;
    for (size_t i = 0; i < out.envs.size(); ++i) {
        ProbabilityTable t = enumerate_joint(spec, out.envs[i]);
        const double h_stable = conditional_entropy(t, "Y", {"Xs"});
        if (i == 0) {
            first_h = h_stable;
            out.h_y = t.entropy({"Y"});
            out.h_y_xs = h_stable;
        }
        check(std::abs(h_stable - first_h) < 1e-12,
              "H_e(Y|X_s) is not environment-constant");
        const double h_joint = conditional_entropy(t, "Y", {"Xs", "Xu"});
        const double mi = mutual_information(t, "Y", "Xu", {"Xs"});
        const double gap = out.h_y_xs - h_joint;
        check(gap >= mi - 1e-12, "gap below I_e(Y;Xu|Xs)");
        check(gap > 0.0, "gap must be strictly positive");
        out.h_y_joint.push_back(h_joint);
        out.gap.push_back(gap);
    }
    return out;
}

// -- built-in benchmark specs --------------------------------------------------

// The default benchmark. A per-position noisy label template T (flip 0.05)
// generates both blocks: the unstable channel is the signed template with an
// environment-dependent gain (+1 in training environments, -1 held out), and
// the stable block is a one-hot view of T with extra flip noise 1/9, so its
// total flip probability from the label is exactly 0.15. In the training
// environments the unstable channel reads the template exactly and subsumes
// the stable block's information (maximal shortcut incentive); the held-out
// environment flips its sign and adds private noise 0.05, making it an
// anti-predictive noisy measurement.
inline EnvironmentSpec shortcut_bench() {
    EnvironmentSpec s;
    s.name = "shortcut-bench";
    s.mode = EmissionMode::discrete;
    s.num_classes = 2;
    s.length = 16;
    s.label_prior = {0.5, 0.5};
    s.train_envs = {"train_a", "train_b"};
    s.test_envs = {"test_ood"};
    s.template_map = {{0.95, 0.05}, {0.05, 0.95}};  // T = noisy label, flip 0.05
    s.stable.patterns = {{1.0, 0.0}, {0.0, 1.0}};   // one-hot view of T
    const double r = 1.0 / 9.0;                     // 0.05 + 0.9 * r = 0.15
    s.stable.map = {{1.0 - r, r}, {r, 1.0 - r}};
    s.unstable_patterns = {{-1.0}, {1.0}};          // signed template
    s.unstable_maps["train_a"] = {{1.0, 0.0}, {0.0, 1.0}};       // gain +1, exact
    s.unstable_maps["train_b"] = {{1.0, 0.0}, {0.0, 1.0}};
    s.unstable_maps["test_ood"] = {{0.05, 0.95}, {0.95, 0.05}};  // gain -1, noise 0.05
    s.validate();
    return s;
}

// Continuous-emission variant for realistic training dynamics.
inline EnvironmentSpec gaussian_shortcut_bench() {
    EnvironmentSpec s;
    s.name = "shortcut-bench-gaussian";
    s.mode = EmissionMode::gaussian;
    s.num_classes = 2;
    s.length = 16;
    s.label_prior = {0.5, 0.5};
    s.train_envs = {"train_a", "train_b"};
    s.test_envs = {"test_ood"};
    s.stable_gauss.means = {{1.0, 0.0}, {0.0, 1.0}};
    s.stable_gauss.sigma = 0.5;
    GaussianBlock plus{{{-1.0}, {1.0}}, 0.05};
    GaussianBlock minus{{{1.0}, {-1.0}}, 0.05};
    s.unstable_gauss["train_a"] = plus;
    s.unstable_gauss["train_b"] = plus;
    s.unstable_gauss["test_ood"] = minus;
    s.validate();
    return s;
}

// Randomized discrete spec that passes all four assumptions; used by the
// oracle property tests. Deterministic in `seed`.
inline EnvironmentSpec random_passing_spec(uint64_t seed) {
    for (uint64_t attempt = 0; attempt < 64; ++attempt) {
        Rng rng = stream_rng(seed, StreamTag::misc, 0xabcdef, attempt);
        EnvironmentSpec s;
        s.name = "random-" + std::to_string(seed);
        s.mode = EmissionMode::discrete;
        s.num_classes = 2 + static_cast<int>(rng.below(2));
        s.length = 8;
        s.label_prior.assign(static_cast<size_t>(s.num_classes), 0.0);
        double total = 0.0;
        for (auto& p : s.label_prior) {
            p = 0.2 + rng.uniform();
            total += p;
        }
        for (auto& p : s.label_prior) p /= total;
        s.train_envs = {"e0", "e1"};
        s.test_envs = {"e2"};

        auto random_map = [&](int rows, int cols) {
            std::vector<std::vector<double>> m(static_cast<size_t>(rows),
                                               std::vector<double>(static_cast<size_t>(cols)));
            for (auto& row : m) {
                double acc = 0.0;
                for (auto& p : row) {
                    p = 0.05 + rng.uniform();
                    acc += p;
                }
                for (auto& p : row) p /= acc;
            }
            return m;
        };
        auto random_patterns = [&](int count, int channels) {
            std::vector<std::vector<double>> p(static_cast<size_t>(count),
                                               std::vector<double>(static_cast<size_t>(channels)));
            for (int a = 0; a < count; ++a)
                for (int c = 0; c < channels; ++c)
                    p[static_cast<size_t>(a)][static_cast<size_t>(c)] =
                        static_cast<double>(a) + 0.1 * rng.normal();
            return p;
        };

        const int a_s = 2 + static_cast<int>(rng.below(2));
        const int a_u = 2 + static_cast<int>(rng.below(2));
        if (rng.below(3) == 0) {
            // exercise the shared-template chain in a third of the specs
            s.template_map = random_map(s.num_classes, s.num_classes);
        }
        s.stable.patterns = random_patterns(a_s, 1 + static_cast<int>(rng.below(2)));
        s.stable.map = random_map(s.num_classes, a_s);
        s.unstable_patterns = random_patterns(a_u, 1 + static_cast<int>(rng.below(2)));
        for (const auto& env : s.all_envs())
            s.unstable_maps[env] = random_map(s.num_classes, a_u);
        s.validate();
        if (verify_assumptions(s).all_pass()) return s;
    }
    throw std::runtime_error("could not generate a passing spec for seed " +
                             std::to_string(seed));
}

}  // namespace dropgen
