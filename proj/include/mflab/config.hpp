#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mflab/data.hpp"
#include "mflab/field.hpp"
#include "mflab/flow.hpp"
#include "mflab/loss.hpp"

namespace mflab {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat sectioned key-value text: `[section]` headers, `key = value` lines,
/// `#` comments. Values keep their token list; every entry remembers its
/// line for error messages.
class ConfigFile {
public:
    struct Entry {
        std::string value;
        int line = 0;
        mutable bool used = false;
    };

    static ConfigFile parse(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError(path + ": cannot open config file");
        ConfigFile cfg;
        cfg.path_ = path;
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto strip = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                if (b == std::string::npos) return std::string();
                const auto e = s.find_last_not_of(" \t\r");
                return s.substr(b, e - b + 1);
            };
            line = strip(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError(cfg.at_line(lineno) + ": malformed section header");
                section = strip(line.substr(1, line.size() - 2));
                cfg.sections_[section];
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(cfg.at_line(lineno) + ": expected key = value");
            const std::string key = strip(line.substr(0, eq));
            const std::string value = strip(line.substr(eq + 1));
            if (key.empty()) throw ConfigError(cfg.at_line(lineno) + ": empty key");
            if (section.empty())
                throw ConfigError(cfg.at_line(lineno) + ": key outside of any [section]");
            auto& sec = cfg.sections_[section];
            if (sec.count(key))
                throw ConfigError(cfg.at_line(lineno) + ": duplicate key '" + key + "'");
            sec[key] = Entry{value, lineno};
        }
        return cfg;
    }

    const std::string& path() const { return path_; }
    std::string at_line(int line) const { return path_ + ":" + std::to_string(line); }

    bool has_section(const std::string& s) const { return sections_.count(s) > 0; }
    bool has(const std::string& s, const std::string& k) const {
        auto it = sections_.find(s);
        return it != sections_.end() && it->second.count(k) > 0;
    }

    const Entry* find(const std::string& s, const std::string& k) const {
        auto it = sections_.find(s);
        if (it == sections_.end()) return nullptr;
        auto jt = it->second.find(k);
        if (jt == it->second.end()) return nullptr;
        jt->second.used = true;
        return &jt->second;
    }

    std::string require(const std::string& s, const std::string& k) const {
        const Entry* e = find(s, k);
        if (!e) throw ConfigError(path_ + ": missing required key [" + s + "] " + k);
        return e->value;
    }

    std::string get(const std::string& s, const std::string& k, const std::string& dflt) const {
        const Entry* e = find(s, k);
        return e ? e->value : dflt;
    }

    double get_num(const std::string& s, const std::string& k, double dflt) const {
        const Entry* e = find(s, k);
        if (!e) return dflt;
        return parse_num(*e, s, k);
    }

    double require_num(const std::string& s, const std::string& k) const {
        const Entry* e = find(s, k);
        if (!e) throw ConfigError(path_ + ": missing required key [" + s + "] " + k);
        return parse_num(*e, s, k);
    }

    std::vector<double> get_nums(const std::string& s, const std::string& k) const {
        const Entry* e = find(s, k);
        if (!e) return {};
        std::vector<double> out;
        std::stringstream ss(e->value);
        std::string tok;
        while (ss >> tok) out.push_back(parse_token(tok, *e, s, k));
        return out;
    }

    bool get_bool(const std::string& s, const std::string& k, bool dflt) const {
        const Entry* e = find(s, k);
        if (!e) return dflt;
        if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
        if (e->value == "false" || e->value == "0" || e->value == "no") return false;
        throw ConfigError(at_line(e->line) + ": expected boolean for [" + s + "] " + k);
    }

    int line_of(const std::string& s, const std::string& k) const {
        auto it = sections_.find(s);
        if (it == sections_.end()) return 0;
        auto jt = it->second.find(k);
        return jt == it->second.end() ? 0 : jt->second.line;
    }

    const std::map<std::string, std::map<std::string, Entry>>& sections() const {
        return sections_;
    }

    // mutate one key (sweep cells); value replaces the token list
    void set(const std::string& s, const std::string& k, const std::string& v) {
        sections_[s][k] = Entry{v, sections_[s].count(k) ? sections_[s][k].line : 0};
    }

private:
    double parse_num(const Entry& e, const std::string& s, const std::string& k) const {
        return parse_token(e.value, e, s, k);
    }
    double parse_token(const std::string& tok, const Entry& e, const std::string& s,
                       const std::string& k) const {
        try {
            std::size_t pos = 0;
            const double v = std::stod(tok, &pos);
            if (pos != tok.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (...) {
            throw ConfigError(at_line(e.line) + ": expected number for [" + s + "] " + k +
                              ", got '" + tok + "'");
        }
    }

    std::string path_;
    std::map<std::string, std::map<std::string, Entry>> sections_;
};

/// Fully built experiment: every component validated and cross-checked.
struct Experiment {
    DataModel data;
    LossModel loss;
    ActivationSpec activation;
    FlowConfig flow;
    std::size_t init_m = 0;
    int init_d = 0;
    std::uint64_t init_seed = 0;
    std::string init_law = "omni";
    std::size_t grid_size = 0;
    std::uint64_t grid_seed = 0;
    std::string grid_file;
    std::size_t mbr_samples = 100000;
    std::size_t sard_bins = 16;
    std::size_t admissible_pairs = 2000;
    std::size_t admissible_n = 100000;
    std::string out_dir;

    Ensemble make_ensemble() const {
        if (init_law == "active") return init_active(init_m, init_d, init_seed);
        return init_omni(init_m, init_d, init_seed);
    }

    std::vector<double> make_grid() const {
        if (!grid_file.empty()) return load_probe_grid_csv(grid_file, init_d + 2);
        return make_probe_grid(grid_size, init_d + 2, grid_seed);
    }
};

namespace detail {

inline std::function<double(std::span<const double>)> parse_lambda(const ConfigFile& cfg) {
    const auto* e = cfg.find("data", "lambda");
    if (!e) throw ConfigError(cfg.path() + ": binary label model requires [data] lambda");
    std::stringstream ss(e->value);
    std::string kind;
    ss >> kind;
    std::vector<double> args;
    double v;
    while (ss >> v) args.push_back(v);
    const auto bad = [&](const std::string& msg) {
        return ConfigError(cfg.at_line(e->line) + ": " + msg);
    };
    if (kind == "const") {
        if (args.size() != 1 || args[0] < 0.0 || args[0] > 1.0)
            throw bad("lambda = const <p> with p in [0,1]");
        const double p = args[0];
        return [p](std::span<const double>) { return p; };
    }
    if (kind == "step") {
        if (args.size() != 2 || args[0] < 0.0 || args[0] > 1.0 || args[1] < 0.0 || args[1] > 1.0)
            throw bad("lambda = step <hi> <lo> with values in [0,1]");
        const double hi = args[0], lo = args[1];
        return [hi, lo](std::span<const double> x) { return x[0] > 0.0 ? hi : lo; };
    }
    if (kind == "logistic") {
        if (args.size() != 1) throw bad("lambda = logistic <k>");
        const double k = args[0];
        return [k](std::span<const double> x) { return 1.0 / (1.0 + std::exp(-k * x[0])); };
    }
    throw bad("unknown lambda kind '" + kind + "' (const|step|logistic)");
}

inline std::function<double(std::span<const double>)> parse_target(const ConfigFile& cfg, int d) {
    const auto* e = cfg.find("data", "target");
    if (!e) throw ConfigError(cfg.path() + ": regression label model requires [data] target");
    std::stringstream ss(e->value);
    std::string kind;
    ss >> kind;
    std::vector<double> args;
    double v;
    while (ss >> v) args.push_back(v);
    if (kind == "zero") return [](std::span<const double>) { return 0.0; };
    if (kind == "linear") {
        if (static_cast<int>(args.size()) != d + 1)
            throw ConfigError(cfg.at_line(e->line) +
                              ": target = linear <c> <w_1..w_d> needs 1+d coefficients");
        const double c = args[0];
        const std::vector<double> w(args.begin() + 1, args.end());
        return [c, w](std::span<const double> x) {
            double s = c;
            for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * x[k];
            return s;
        };
    }
    throw ConfigError(cfg.at_line(e->line) + ": unknown target kind '" + kind + "' (zero|linear)");
}

}  // namespace detail

inline Experiment build_experiment(const ConfigFile& cfg) {
    Experiment ex;

    // [data]
    ex.data.dim = static_cast<int>(cfg.require_num("data", "dim"));
    if (ex.data.dim < 1)
        throw ConfigError(cfg.at_line(cfg.line_of("data", "dim")) + ": dim must be >= 1");
    ex.data.seed = static_cast<std::uint64_t>(cfg.require_num("data", "seed"));
    ex.data.strict_p4 = cfg.get_bool("data", "strict_p4", false);
    const std::string law = cfg.require("data", "law");
    if (law == "uniform_sphere" || law == "uniform_ball") {
        ex.data.input.kind = law == "uniform_sphere" ? InputLaw::Kind::uniform_sphere
                                                     : InputLaw::Kind::uniform_ball;
        ex.data.input.radius = cfg.get_num("data", "radius", 1.0);
        if (ex.data.input.radius <= 0.0)
            throw ConfigError(cfg.at_line(cfg.line_of("data", "radius")) + ": radius must be > 0");
    } else if (law == "gaussian") {
        ex.data.input.kind = InputLaw::Kind::gaussian_mixture;
        MixtureComponent c;
        c.mean.assign(static_cast<std::size_t>(ex.data.dim), 0.0);
        c.scale = cfg.get_num("data", "scale", 1.0);
        c.weight = 1.0;
        ex.data.input.components = {c};
    } else if (law == "gaussian_mixture") {
        ex.data.input.kind = InputLaw::Kind::gaussian_mixture;
        const int k = static_cast<int>(cfg.require_num("data", "components"));
        double wsum = 0.0;
        for (int i = 0; i < k; ++i) {
            const std::string p = "comp" + std::to_string(i);
            MixtureComponent c;
            c.mean = cfg.get_nums("data", p + ".mean");
            if (static_cast<int>(c.mean.size()) != ex.data.dim)
                throw ConfigError(cfg.path() + ": [data] " + p + ".mean needs dim entries");
            c.scale = cfg.require_num("data", p + ".scale");
            c.weight = cfg.require_num("data", p + ".weight");
            wsum += c.weight;
            ex.data.input.components.push_back(std::move(c));
        }
        if (std::abs(wsum - 1.0) > 1e-9)
            throw ConfigError(cfg.path() + ": [data] mixture weights must sum to 1");
    } else if (law == "empirical") {
        ex.data.input.kind = InputLaw::Kind::empirical;
        const int k = static_cast<int>(cfg.require_num("data", "npoints"));
        for (int i = 0; i < k; ++i) {
            auto pt = cfg.get_nums("data", "point" + std::to_string(i));
            if (static_cast<int>(pt.size()) != ex.data.dim)
                throw ConfigError(cfg.path() + ": [data] point" + std::to_string(i) +
                                  " needs dim entries");
            ex.data.input.points.push_back(std::move(pt));
        }
        if (ex.data.input.points.empty())
            throw ConfigError(cfg.path() + ": empirical law needs npoints >= 1");
    } else {
        throw ConfigError(cfg.at_line(cfg.line_of("data", "law")) + ": unknown input law '" + law +
                          "'");
    }

    const std::string label = cfg.require("data", "label");
    if (label == "binary") {
        ex.data.label.kind = LabelModel::Kind::binary;
        ex.data.label.lambda = detail::parse_lambda(cfg);
    } else if (label == "regression") {
        ex.data.label.kind = LabelModel::Kind::regression;
        ex.data.label.target = detail::parse_target(cfg, ex.data.dim);
        const auto* e = cfg.find("data", "noise");
        if (e) {
            std::stringstream ss(e->value);
            std::string kind;
            double s = 0.0;
            ss >> kind;
            if (kind == "none") {
                ex.data.label.noise = LabelModel::Noise::none;
            } else if (kind == "gaussian" && (ss >> s) && s >= 0.0) {
                ex.data.label.noise = LabelModel::Noise::gaussian;
                ex.data.label.noise_scale = s;
            } else if (kind == "uniform" && (ss >> s) && s >= 0.0) {
                ex.data.label.noise = LabelModel::Noise::uniform;
                ex.data.label.noise_scale = s;
            } else {
                throw ConfigError(cfg.at_line(e->line) +
                                  ": noise = none | gaussian <s> | uniform <s>, s >= 0");
            }
        }
    } else {
        throw ConfigError(cfg.at_line(cfg.line_of("data", "label")) + ": unknown label model '" +
                          label + "'");
    }

    // [loss]
    const std::string kind = cfg.require("loss", "kind");
    if (kind == "huber") ex.loss.kind = LossModel::Kind::huber;
    else if (kind == "pseudo_huber") ex.loss.kind = LossModel::Kind::pseudo_huber;
    else if (kind == "softplus") ex.loss.kind = LossModel::Kind::softplus;
    else if (kind == "power") ex.loss.kind = LossModel::Kind::power;
    else
        throw ConfigError(cfg.at_line(cfg.line_of("loss", "kind")) + ": unknown loss kind '" +
                          kind + "'");
    if (ex.loss.kind == LossModel::Kind::power) {
        ex.loss.p = cfg.require_num("loss", "p");
        if (ex.loss.p <= 1.0)
            throw ConfigError(cfg.at_line(cfg.line_of("loss", "p")) + ": power needs p > 1");
    }
    if (cfg.has("loss", "clip")) {
        ex.loss.clip = cfg.require_num("loss", "clip");
        if (*ex.loss.clip <= 0.0)
            throw ConfigError(cfg.at_line(cfg.line_of("loss", "clip")) + ": clip must be > 0");
    }

    // cross-checks
    if (ex.loss.kind == LossModel::Kind::power && !ex.loss.clip && !ex.data.input.bounded())
        throw ConfigError(cfg.at_line(cfg.line_of("loss", "kind")) +
                          ": power loss has unbounded derivative, which requires compactly "
                          "supported data; use bounded input laws or set [loss] clip");
    if (ex.loss.kind == LossModel::Kind::softplus &&
        ex.data.label.kind != LabelModel::Kind::binary)
        throw ConfigError(cfg.at_line(cfg.line_of("loss", "kind")) +
                          ": softplus loss expects binary labels in {-1,+1}");

    // [init]
    ex.init_m = static_cast<std::size_t>(cfg.require_num("init", "m"));
    ex.init_d = static_cast<int>(cfg.require_num("init", "d"));
    ex.init_seed = static_cast<std::uint64_t>(cfg.require_num("init", "seed"));
    ex.init_law = cfg.get("init", "law", "omni");
    if (ex.init_m < 1)
        throw ConfigError(cfg.at_line(cfg.line_of("init", "m")) + ": m must be >= 1");
    if (ex.init_law != "omni" && ex.init_law != "active")
        throw ConfigError(cfg.at_line(cfg.line_of("init", "law")) + ": unknown init law '" +
                          ex.init_law + "' (omni|active)");
    if (ex.init_d != ex.data.dim)
        throw ConfigError(cfg.path() + ": [init] d must match [data] dim");

    // [activation]
    ex.activation.leak = cfg.get_num("activation", "leak", 0.0);
    ex.activation.cutoff = cfg.get_bool("activation", "cutoff", false);
    if (ex.activation.leak < 0.0 || ex.activation.leak >= 1.0)
        throw ConfigError(cfg.at_line(cfg.line_of("activation", "leak")) +
                          ": leak must lie in [0,1)");

    // [flow]
    ex.flow.dt = cfg.require_num("flow", "dt");
    ex.flow.horizon = cfg.require_num("flow", "T");
    if (ex.flow.dt <= 0.0 || ex.flow.horizon <= ex.flow.dt)
        throw ConfigError(cfg.at_line(cfg.line_of("flow", "dt")) + ": need 0 < dt < T");
    const std::string integ = cfg.get("flow", "integrator", "rk4");
    if (integ == "euler") ex.flow.integrator = FlowConfig::Integrator::euler;
    else if (integ == "rk4") ex.flow.integrator = FlowConfig::Integrator::rk4;
    else
        throw ConfigError(cfg.at_line(cfg.line_of("flow", "integrator")) +
                          ": unknown integrator '" + integ + "' (euler|rk4)");
    ex.flow.batch_size = static_cast<std::size_t>(cfg.get_num("flow", "batch_size", 256));
    if (ex.flow.batch_size < 1)
        throw ConfigError(cfg.at_line(cfg.line_of("flow", "batch_size")) +
                          ": batch_size must be >= 1");
    const std::string mode = cfg.get("flow", "batch_mode", "fresh");
    if (mode == "fresh") ex.flow.batch_mode = FlowConfig::BatchMode::fresh;
    else if (mode == "fixed_pool") ex.flow.batch_mode = FlowConfig::BatchMode::fixed_pool;
    else
        throw ConfigError(cfg.at_line(cfg.line_of("flow", "batch_mode")) +
                          ": unknown batch mode '" + mode + "' (fresh|fixed_pool)");
    ex.flow.pool_size = static_cast<std::size_t>(cfg.get_num("flow", "pool_size", 0));
    ex.flow.record_every = static_cast<std::size_t>(cfg.get_num("flow", "record_every", 1));
    if (ex.flow.record_every < 1)
        throw ConfigError(cfg.at_line(cfg.line_of("flow", "record_every")) +
                          ": record_every must be >= 1");
    if (cfg.has("flow", "freeze_field")) ex.flow.freeze_time = cfg.require_num("flow", "freeze_field");

    // [probe]
    ex.grid_size = static_cast<std::size_t>(cfg.get_num("probe", "grid_size", 256));
    ex.grid_seed = static_cast<std::uint64_t>(cfg.get_num("probe", "grid_seed", 1));
    ex.grid_file = cfg.get("probe", "grid_file", "");
    ex.mbr_samples = static_cast<std::size_t>(cfg.get_num("probe", "mbr_samples", 100000));
    ex.sard_bins = static_cast<std::size_t>(cfg.get_num("probe", "sard_bins", 16));

    // [admissible]
    ex.admissible_pairs = static_cast<std::size_t>(cfg.get_num("admissible", "pairs", 2000));
    ex.admissible_n = static_cast<std::size_t>(cfg.get_num("admissible", "n", 100000));

    // [output]
    ex.out_dir = cfg.require("output", "directory");

    return ex;
}

}  // namespace mflab
