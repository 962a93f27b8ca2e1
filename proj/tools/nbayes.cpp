// nbayes: data generation, DML/MIM training, probing, oracle checks and grid export.
//
// Every command resolves its parameters as defaults < --config file < flags
// (< sweep entry for --sweep runs) and writes the resolved record next to its outputs.
// Exit codes: 0 success, 1 training or verification failure, 2 usage error.

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "neuralbayes/checkpoint.hpp"
#include "neuralbayes/errors.hpp"
#include "neuralbayes/oracles.hpp"
#include "neuralbayes/train.hpp"

using namespace nb;
using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

bool g_quiet = false;

void note(const std::string& msg) {
    if (!g_quiet) std::cerr << msg << '\n';
}

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------ config

std::string dashed(std::string key) {
    std::replace(key.begin(), key.end(), '_', '-');
    return key;
}

bool same_kind(const json& want, const json& got) {
    if (want.is_boolean()) return got.is_boolean();
    if (want.is_number_unsigned()) return got.is_number_unsigned() || (got.is_number_integer() && got.get<long long>() >= 0);
    if (want.is_number()) return got.is_number();
    if (want.is_string()) return got.is_string();
    if (want.is_array()) return got.is_array();
    return want.type() == got.type();
}

json flag_value(const json& want, const std::string& raw) {
    if (want.is_string()) return raw;
    if (want.is_boolean()) {
        if (raw == "on" || raw == "true" || raw == "yes" || raw == "1") return true;
        if (raw == "off" || raw == "false" || raw == "no" || raw == "0") return false;
        throw UsageError("expected on/off, got '" + raw + "'");
    }
    try {
        return json::parse(raw);
    } catch (const json::exception&) {
        throw UsageError("cannot parse '" + raw + "'");
    }
}

void overlay(json& cfg, const json& layer, const std::string& source) {
    if (!layer.is_object()) throw UsageError(source + ": expected a JSON object");
    for (const auto& [key, value] : layer.items()) {
        if (!cfg.contains(key)) {
            std::string valid;
            for (const auto& [k, v] : cfg.items()) valid += (valid.empty() ? "" : ", ") + k;
            throw UsageError(source + ": unknown key '" + key + "' (valid: " + valid + ")");
        }
        if (!same_kind(cfg[key], value)) {
            throw UsageError(source + ": key '" + key + "' expects " + std::string(cfg[key].type_name()) + ", got " +
                             value.dump());
        }
        cfg[key] = value;
    }
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

/// Parameter record of one command: every default key becomes a --flag.
struct RunConfig {
    json defaults;
    std::map<std::string, std::string> raw;
    std::map<std::string, CLI::Option*> opts;
    std::string config_path;

    void bind(CLI::App* app) {
        for (const auto& [key, value] : defaults.items()) {
            opts[key] = app->add_option("--" + dashed(key), raw[key], "default: " + value.dump());
        }
        app->add_option("--config", config_path, "JSON file of parameters");
    }

    json resolve(const json* sweep_entry = nullptr, const json* preset = nullptr) const {
        json cfg = defaults;
        bool seed_set = false;
        if (preset) overlay(cfg, *preset, "preset");
        if (!config_path.empty()) {
            const json file = read_json(config_path);
            overlay(cfg, file, config_path);
            seed_set = seed_set || file.contains("seed");
        }
        for (const auto& [key, opt] : opts) {
            if (opt->count() == 0) continue;
            cfg[key] = flag_value(defaults[key], raw.at(key));
            if (!same_kind(defaults[key], cfg[key])) throw UsageError("--" + dashed(key) + ": wrong value type");
            seed_set = seed_set || key == "seed";
        }
        if (sweep_entry) {
            overlay(cfg, *sweep_entry, "sweep entry");
            seed_set = seed_set || sweep_entry->contains("seed");
        }
        if (!seed_set && cfg.contains("seed")) {
            if (const char* env = std::getenv("NB_SEED")) {
                try {
                    std::size_t used = 0;
                    cfg["seed"] = std::stoull(env, &used);
                    if (used != std::string(env).size()) throw std::invalid_argument(env);
                } catch (const std::exception&) {
                    throw UsageError(std::string("NB_SEED is not an unsigned integer: ") + env);
                }
            }
        }
        return cfg;
    }
};

// ------------------------------------------------------------------ files

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    const std::string bytes = os.str();
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("SHA-256 failed for " + path.string());
    }
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
}

void write_manifest(const fs::path& dir, const std::string& command) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() != "MANIFEST.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    json m;
    m["command"] = command;
    m["artifacts"] = json::array();
    for (const auto& f : files) {
        m["artifacts"].push_back(
            {{"path", fs::relative(f, dir).generic_string()}, {"bytes", fs::file_size(f)}, {"sha256", sha256_file(f)}});
    }
    write_text(dir / "MANIFEST.json", m.dump(2) + "\n");
}

fs::path metadata_path(const fs::path& csv) {
    fs::path p = csv;
    return p.replace_extension(".json");
}

/// CSV point cloud (with an optional metadata sidecar) or a directory holding IDX files.
ManifoldDataset load_data(const std::string& path) {
    if (path.empty()) throw UsageError("--data is required");
    const fs::path p(path);
    if (fs::is_directory(p)) return load_idx((p / "images-idx3-ubyte").string(), (p / "labels-idx1-ubyte").string());
    if (!fs::exists(p)) throw UsageError("no such data file: " + path);
    ManifoldDataset ds = read_csv(path);
    if (fs::exists(metadata_path(p))) {
        const json meta = read_json(metadata_path(p).string());
        if (meta.contains("lift")) {
            ds.base_dim = meta["lift"]["base_dim"].get<std::size_t>();
            ds.lift_dim = meta["lift"]["dim"].get<std::size_t>();
            ds.lift_seed = meta["lift"]["seed"].get<std::uint64_t>();
        }
    }
    return ds;
}

json lift_json(const ManifoldDataset& ds) {
    if (ds.lift_dim == 0) return nullptr;
    return {{"base_dim", ds.base_dim}, {"dim", ds.lift_dim}, {"seed", ds.lift_seed}};
}

json standardizer_json(const Standardizer& s) {
    return {{"mean", std::vector<double>(s.mean.values().begin(), s.mean.values().end())},
            {"std", std::vector<double>(s.std.values().begin(), s.std.values().end())}};
}

Standardizer standardizer_from(const json& j) {
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto sd = j.at("std").get<std::vector<double>>();
    return {Tensor(Shape{mean.size()}, mean), Tensor(Shape{sd.size()}, sd)};
}

// ------------------------------------------------------------------ shared training helpers

Network build_network(const json& cfg, const ManifoldDataset& ds, std::size_t head, bool softmax, std::uint64_t seed) {
    const std::string cnn = cfg.at("cnn").get<std::string>();
    const bool bn = cfg.at("batchnorm").get<bool>();
    if (!cnn.empty()) {
        if (ds.sample_shape.size() != 3) throw UsageError("cnn architectures need image data (IDX input)");
        return make_cnn(cnn, ds.sample_shape, seed, bn, softmax);
    }
    return make_mlp({ds.dim(), cfg.at("hidden").get<std::vector<std::size_t>>(), bn, head, softmax}, seed);
}

void write_log_artifacts(const fs::path& dir, const TrainLog& log) {
    write_text(dir / "train_log.jsonl", log.to_jsonl());
    std::ostringstream csv;
    csv.precision(17);
    csv << "step,term,value\n";
    for (const auto& r : log.reports) {
        csv << r.step << ",mi_term," << r.mi_term << "\n";
        csv << r.step << ",prior_term," << r.prior_term << "\n";
        csv << r.step << ",smooth_term," << r.smooth_term << "\n";
        csv << r.step << ",total," << r.total << "\n";
    }
    write_text(dir / "metrics.csv", csv.str());
}

struct Splits {
    ManifoldDataset train, val;
    bool has_val = false;
};

Splits make_splits(const ManifoldDataset& ds, double val_fraction, std::uint64_t split_seed) {
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw UsageError("val_fraction must lie in [0, 1)");
    if (val_fraction == 0.0) return {ds, {}, false};
    auto parts = split(ds, {1.0 - val_fraction, val_fraction}, split_seed);
    return {std::move(parts[0]), std::move(parts[1]), true};
}

void check_common(const json& cfg) {
    if (cfg.at("out_dir").get<std::string>().empty()) throw UsageError("--out-dir is required");
    AccumulationSchedule{cfg.at("mbs").get<std::size_t>(), cfg.at("bs").get<std::size_t>(),
                         cfg.at("epochs").get<std::size_t>()}
        .validate();
}

// ------------------------------------------------------------------ gen-data

json gen_defaults() {
    return {{"kind", "moons"}, {"n", 1000u},      {"noise", 0.05},   {"dim", 2u},      {"seed", 0u},
            {"gap", 0.5},      {"radii", {1.0, 2.0}}, {"k", 3u},     {"lift_seed", 0u}, {"out", ""}};
}

int cmd_gen_data(const json& cfg) {
    const std::string kind = cfg["kind"], out = cfg["out"];
    if (out.empty()) throw UsageError("--out is required");
    const auto n = cfg["n"].get<std::size_t>();
    const auto seed = cfg["seed"].get<std::uint64_t>();
    const double noise = cfg["noise"];
    ManifoldDataset ds;
    if (kind == "moons") {
        ds = make_two_moons(n, cfg["gap"], noise, seed);
    } else if (kind == "circles") {
        ds = make_circles(n, cfg["radii"].get<std::vector<double>>(), noise, seed);
    } else if (kind == "blobs") {
        ds = make_blobs(cfg["k"].get<std::size_t>(), n, {}, noise, seed);
    } else {
        throw UsageError("unknown --kind '" + kind + "' (moons, circles, blobs)");
    }
    const auto dim = cfg["dim"].get<std::size_t>();
    if (dim < ds.dim()) throw UsageError("--dim must be at least " + std::to_string(ds.dim()));
    if (dim > ds.dim()) {
        const std::uint64_t lift_seed = cfg["lift_seed"].get<std::uint64_t>() ? cfg["lift_seed"].get<std::uint64_t>()
                                                                                : derive_seed(seed, 100);
        ds = lift_and_rotate(ds, dim, lift_seed);
    }
    write_csv(out, ds);
    json meta;
    meta["config"] = cfg;
    meta["rows"] = ds.size();
    meta["components"] = ds.num_components();
    meta["min_intercomponent_distance"] = min_intercomponent_distance(ds);
    if (ds.lift_dim) meta["lift"] = lift_json(ds);
    write_text(metadata_path(out), meta.dump(2) + "\n");
    note("wrote " + std::to_string(ds.size()) + " points to " + out);
    return 0;
}

// ------------------------------------------------------------------ train-dml

json dml_defaults() {
    return {{"data", ""},
            {"k", 2u},
            {"beta", 1.0},
            {"mbs", 400u},
            {"bs", 400u},
            {"lr", 1e-3},
            {"weight_decay", 0.0},
            {"epochs", 500u},
            {"seed", 0u},
            {"out_dir", ""},
            {"hidden", {400u, 400u, 400u, 400u}},
            {"batchnorm", true},
            {"cnn", ""},
            {"epsilon", 1e-7},
            {"noise_sigma", 0.1},
            {"standardize", true},
            {"stop_split", "none"},
            {"val_fraction", 0.2},
            {"split_seed", 0u},
            {"patience", 20u}};
}

json dml_preset(const std::string& name) {
    if (name.empty()) return json::object();
    if (name == "mnist-cnn") {
        return {{"mbs", 5000u}, {"bs", 5000u}, {"beta", 1.0}, {"epochs", 100u}, {"k", 10u},
                {"cnn", "C(32,3,1,1)-P(2,2,0,max)-C(64,3,1,1)-P(2,2,0,max)-C(128,3,1,0)-P(.,.,.,avg)-FC(10)"}};
    }
    throw UsageError("unknown --preset '" + name + "' (mnist-cnn)");
}

double binary_objective_of(const Tensor& probs) {
    Tensor l(Shape{probs.rows()});
    for (std::size_t i = 0; i < probs.rows(); ++i) l[i] = probs.at(i, 0);
    return dml_binary_objective(l);
}

double dml_loss_of(const Tensor& probs, std::size_t k, double eps) {
    if (k == 2) {
        Tensor l(Shape{probs.rows()});
        for (std::size_t i = 0; i < probs.rows(); ++i) l[i] = probs.at(i, 0);
        return dml_binary_loss(l, eps);
    }
    return dml_multi_loss(PosteriorBatch(probs), eps);
}

int cmd_train_dml(const json& cfg) {
    check_common(cfg);
    const auto k = cfg["k"].get<std::size_t>();
    const auto seed = cfg["seed"].get<std::uint64_t>();
    const double beta = cfg["beta"];
    if (beta < 0.5 || beta > 6.0) note("note: beta is usually chosen from [0.5, 6]");
    const std::string stop = cfg["stop_split"];
    if (stop != "none" && stop != "train" && stop != "val") throw UsageError("stop_split must be none, train or val");
    const fs::path dir = cfg["out_dir"].get<std::string>();
    fs::create_directories(dir);

    ManifoldDataset all = load_data(cfg["data"]);
    json extra;
    extra["lift"] = lift_json(all);
    if (cfg["standardize"].get<bool>()) {
        const Standardizer s = fit_standardizer(all.points);
        all = standardize_with(all, s);
        extra["standardizer"] = standardizer_json(s);
    }
    const Splits sp = make_splits(all, stop == "val" ? cfg["val_fraction"].get<double>() : 0.0,
                                  cfg["split_seed"].get<std::uint64_t>());
    const ManifoldDataset& stop_set = sp.has_val ? sp.val : sp.train;

    DmlConfig dcfg;
    dcfg.k = k;
    dcfg.beta = beta;
    dcfg.epsilon = cfg["epsilon"];
    dcfg.noise_sigma = cfg["noise_sigma"];
    Network net = build_network(cfg, all, k, true, seed);
    const ManifoldDataset& train = sp.train;
    AdamState opt;
    opt.lr = cfg["lr"];
    opt.weight_decay = cfg["weight_decay"];
    const auto patience = cfg["patience"].get<std::size_t>();
    double best = -INFINITY;
    std::size_t since_best = 0;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainLog log = train_objective(
        net, train, dml_objective(dcfg),
        {cfg["mbs"].get<std::size_t>(), cfg["bs"].get<std::size_t>(), cfg["epochs"].get<std::size_t>()}, opt, seed,
        [&](std::size_t epoch, const Network& n) {
            if (stop == "none") {
                if (epoch % 10 == 0) note("epoch " + std::to_string(epoch));
                return true;
            }
            const Tensor p = predict_all(n, stop_set);
            const double score = -dml_loss_of(p, k, dcfg.epsilon);
            if (score > best) {
                best = score;
                since_best = 0;
            } else {
                ++since_best;
            }
            note("epoch " + std::to_string(epoch) + " stop-split loss " + std::to_string(-score));
            return since_best < patience;
        });
    note("trained " + std::to_string(log.epochs_run) + " epochs in " +
         std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");

    const Tensor probs = predict_all(net, all);
    const std::vector<int> pred = argmax_labels(probs);
    json summary;
    summary["epochs_run"] = log.epochs_run;
    summary["updates"] = log.reports.size();
    if (static_cast<std::size_t>(all.num_components()) <= k && k <= 8) {
        summary["cluster_accuracy"] = cluster_accuracy(pred, all.components, k);
    }
    summary["dml_loss"] = dml_loss_of(probs, k, dcfg.epsilon);
    if (k == 2) summary["dml_objective"] = binary_objective_of(probs);

    std::ostringstream labels;
    labels.precision(17);
    labels << "index,component,predicted,max_prob\n";
    for (std::size_t i = 0; i < pred.size(); ++i) {
        labels << i << ',' << all.components[i] << ',' << pred[i] << ','
               << probs.at(i, static_cast<std::size_t>(pred[i])) << '\n';
    }
    write_text(dir / "labels.csv", labels.str());
    write_text(dir / "config.json", cfg.dump(2) + "\n");
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    write_log_artifacts(dir, log);
    extra["config"] = cfg;
    save_checkpoint((dir / "model").string(), net, {seed, extra.dump()});
    write_manifest(dir, "train-dml");
    std::cout << summary.dump() << std::endl;
    const bool finite = std::isfinite(summary["dml_loss"].get<double>());
    return finite ? 0 : 1;
}

// ------------------------------------------------------------------ train-mim

json mim_defaults() {
    return {{"data", ""},
            {"alpha", 2.0},
            {"beta", 4.0},
            {"mbs", 500u},
            {"bs", 2000u},
            {"scales", false},
            {"v1_prior", false},
            {"prior_ema_decay", 0.0},
            {"lr", 1e-3},
            {"weight_decay", 0.0},
            {"epochs", 20u},
            {"seed", 0u},
            {"out_dir", ""},
            {"hidden", {500u, 500u, 500u}},
            {"batchnorm", false},
            {"cnn", ""},
            {"epsilon", 1e-7},
            {"standardize", true},
            {"val_fraction", 0.2},
            {"split_seed", 0u},
            {"stop_split", "none"},
            {"probe_every", 5u},
            {"patience", 2u}};
}

ProbeConfig probe_config(std::uint64_t seed) {
    ProbeConfig p;
    p.seed = seed;
    return p;
}

double probe_tap(const Network& net, const ManifoldDataset& tr, const ManifoldDataset& te, std::size_t tap,
                 const ProbeConfig& pc) {
    return linear_probe(extract_features(net, tr, tap), tr.components, extract_features(net, te, tap), te.components,
                        pc);
}

int cmd_train_mim(const json& cfg) {
    check_common(cfg);
    const auto seed = cfg["seed"].get<std::uint64_t>();
    const std::string stop = cfg["stop_split"];
    if (stop != "none" && stop != "val") throw UsageError("stop_split must be none or val");
    const fs::path dir = cfg["out_dir"].get<std::string>();
    fs::create_directories(dir);

    const ManifoldDataset all = load_data(cfg["data"]);
    Splits sp = make_splits(all, cfg["val_fraction"], cfg["split_seed"].get<std::uint64_t>());
    if (stop == "val" && !sp.has_val) throw UsageError("stop_split val needs val_fraction > 0");
    json extra;
    extra["lift"] = lift_json(all);
    extra["split"] = {{"val_fraction", cfg["val_fraction"]}, {"seed", cfg["split_seed"]}};
    if (cfg["standardize"].get<bool>()) {
        const Standardizer s = fit_standardizer(sp.train.points);
        sp.train = standardize_with(sp.train, s);
        if (sp.has_val) sp.val = standardize_with(sp.val, s);
        extra["standardizer"] = standardizer_json(s);
    }

    MimConfig mcfg;
    mcfg.alpha = cfg["alpha"];
    mcfg.beta = cfg["beta"];
    mcfg.epsilon = cfg["epsilon"];
    mcfg.use_scales = cfg["scales"];
    mcfg.v1_prior = cfg["v1_prior"];
    mcfg.prior_ema_decay = cfg["prior_ema_decay"];
    Network net = build_network(cfg, sp.train, 0, false, seed);
    const ManifoldDataset& train = sp.train;
    const ManifoldDataset& val = sp.val;
    AdamState opt;
    opt.lr = cfg["lr"];
    opt.weight_decay = cfg["weight_decay"];
    const std::size_t last = net.taps().size() - 1;
    const auto every = std::max<std::size_t>(1, cfg["probe_every"].get<std::size_t>());
    const auto patience = cfg["patience"].get<std::size_t>();
    double best = -1.0;
    std::size_t since_best = 0;
    const TrainLog log = train_objective(
        net, train, mim_objective(mcfg),
        {cfg["mbs"].get<std::size_t>(), cfg["bs"].get<std::size_t>(), cfg["epochs"].get<std::size_t>()}, opt, seed,
        [&](std::size_t epoch, const Network& n) {
            note("epoch " + std::to_string(epoch));
            if (stop != "val" || epoch % every != 0) return true;
            const double acc = probe_tap(n, train, val, last, probe_config(seed));
            note("  probe accuracy " + std::to_string(acc));
            if (acc > best) {
                best = acc;
                since_best = 0;
            } else {
                ++since_best;
            }
            return since_best < patience;
        });

    json summary;
    summary["epochs_run"] = log.epochs_run;
    summary["updates"] = log.reports.size();
    summary["dead_unit_fraction"] = dead_unit_fraction(net, train);
    json per_tap = json::array();
    for (std::size_t t = 0; t < net.taps().size(); ++t) {
        const auto prior = state_prior(net, train, t);
        std::size_t dead = 0;
        for (double p : prior) dead += p < 1.0 / (10.0 * static_cast<double>(prior.size()));
        per_tap.push_back({{"tap", "h" + std::to_string(t + 1)}, {"units", prior.size()}, {"dead", dead}});
    }
    summary["taps"] = per_tap;
    if (sp.has_val) summary["probe_accuracy"] = probe_tap(net, train, val, last, probe_config(seed));
    if (!log.reports.empty()) summary["final_total"] = log.reports.back().total;

    write_text(dir / "config.json", cfg.dump(2) + "\n");
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    write_log_artifacts(dir, log);
    extra["config"] = cfg;
    save_checkpoint((dir / "model").string(), net, {seed, extra.dump()});
    write_manifest(dir, "train-mim");
    std::cout << summary.dump() << std::endl;
    return log.reports.empty() || std::isfinite(log.reports.back().total) ? 0 : 1;
}

// ------------------------------------------------------------------ probe

json probe_defaults() {
    return {{"checkpoint", ""}, {"data", ""}, {"layer", "last"}, {"hidden", 200u}, {"lr", 1e-3},
            {"epochs", 30u},    {"batch", 128u}, {"seed", 0u},   {"val_fraction", 0.2}};
}

std::size_t resolve_tap(const Network& net, const std::string& layer) {
    const std::size_t n = net.taps().size();
    std::string names;
    for (std::size_t t = 0; t < n; ++t) names += (t ? ", h" : "h") + std::to_string(t + 1);
    if (n == 0) throw UsageError("checkpoint has no taps");
    if (layer == "last") return n - 1;
    if (layer.size() > 1 && layer[0] == 'h') {
        try {
            std::size_t used = 0;
            const std::size_t i = std::stoul(layer.substr(1), &used);
            if (used == layer.size() - 1 && i >= 1 && i <= n) return i - 1;
        } catch (const std::exception&) {
        }
    }
    throw UsageError("unknown layer '" + layer + "'; available taps: " + names + ", last");
}

int cmd_probe(const json& cfg) {
    const std::string ckpt = cfg["checkpoint"];
    if (ckpt.empty()) throw UsageError("--checkpoint is required");
    CheckpointMeta meta;
    const Network net = load_checkpoint(ckpt, &meta);
    const std::size_t tap = resolve_tap(net, cfg["layer"]);
    const json extra = json::parse(meta.extra_json);
    const ManifoldDataset all = load_data(cfg["data"]);
    double fraction = cfg["val_fraction"];
    std::uint64_t split_seed = 0;
    if (extra.contains("split") && extra["split"]["val_fraction"].get<double>() > 0.0) {
        fraction = extra["split"]["val_fraction"];
        split_seed = extra["split"]["seed"];
    }
    Splits sp = make_splits(all, fraction, split_seed);
    if (!sp.has_val) throw UsageError("probe needs val_fraction > 0");
    if (extra.contains("standardizer")) {
        const Standardizer s = standardizer_from(extra["standardizer"]);
        sp.train = standardize_with(sp.train, s);
        sp.val = standardize_with(sp.val, s);
    }
    ProbeConfig pc;
    pc.hidden = cfg["hidden"];
    pc.lr = cfg["lr"];
    pc.epochs = cfg["epochs"];
    pc.batch = cfg["batch"];
    pc.seed = cfg["seed"];
    const double acc = probe_tap(net, sp.train, sp.val, tap, pc);
    json out{{"layer", cfg["layer"]}, {"tap", "h" + std::to_string(tap + 1)}, {"accuracy", acc}};
    std::cout << out.dump() << std::endl;
    return 0;
}

// ------------------------------------------------------------------ gradcheck

json gradcheck_defaults() {
    return {{"seed", 0u}, {"cases", 50u}, {"wrong_branch", false}, {"out", ""}};
}

Tensor random_simplex_rows(std::size_t b, std::size_t k, Rng& rng) {
    Tensor t(Shape{b, k});
    for (std::size_t r = 0; r < b; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += (t.at(r, c) = std::exp(3.0 * standard_normal(rng)));
        for (std::size_t c = 0; c < k; ++c) t.at(r, c) /= s;
    }
    return t;
}

// Autodiff gradient of the DML loss of a random small network versus central differences.
double dml_fd_case(std::uint64_t seed, std::size_t id) {
    Rng rng(derive_seed(seed, 5000 + id));
    auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    const std::size_t in = pick(2, 16), k = pick(2, 4), b = pick(4, 32);
    Network net = oracles::random_softmax_mlp(in, {pick(2, 16)}, k, rng());
    Tensor x(Shape{b, in});
    for (double& v : x.values()) v = standard_normal(rng);
    for (int attempt = 0;; ++attempt) {
        const auto dist = oracles::relu_kink_distance(net, x);
        bool clean = true;
        for (std::size_t r = 0; r < b; ++r) {
            if (dist[r] >= oracles::kKinkMargin) continue;
            clean = false;
            for (std::size_t c = 0; c < in; ++c) x.at(r, c) = standard_normal(rng);
        }
        if (clean) break;
        if (attempt == 1000) throw GenerationError("could not draw a batch away from ReLU kinks");
    }
    const double eps = 1e-7;
    Tape tape;
    Var out = net.forward(tape, tape.constant(x), {Mode::Eval, false}).output;
    const GradientMap analytic = tape.backward(k == 2 ? dml_binary_loss(column(out, 0), eps) : dml_multi_loss(out, eps));
    const GradientMap fd = oracles::finite_diff_grad([&] { return dml_loss_of(net.predict(x), k, eps); }, net.parameters());
    return oracles::max_rel_diff(analytic, fd);
}

int cmd_gradcheck(const json& cfg) {
    const auto seed = cfg["seed"].get<std::uint64_t>();
    const auto cases = cfg["cases"].get<std::size_t>();
    if (cases == 0) throw UsageError("--cases must be positive");
    const bool wrong = cfg["wrong_branch"];
    json report;
    report["seed"] = seed;
    report["cases"] = cases;
    report["wrong_branch"] = wrong;
    json suites;
    std::map<std::string, std::vector<std::size_t>> failing;
    auto record = [&](const std::string& suite, std::size_t id, const char* key, double value, bool pass) {
        suites[suite].push_back({{"case_id", id}, {key, value}, {"pass", pass}});
        if (!pass) failing[suite].push_back(id);
    };

    Rng rng(derive_seed(seed, 1));
    for (std::size_t id = 0; id < cases; ++id) {
        const std::size_t b = std::uniform_int_distribution<std::size_t>(1, 64)(rng);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
        const PosteriorBatch p(random_simplex_rows(b, k, rng));
        const double d = std::abs(mi_closed_form(p) - oracles::brute_force_mi(p));
        record("mi", id, "max_abs_diff", d, d <= 1e-10);
    }
    for (std::size_t id = 0; id < cases; ++id) {
        const auto c = oracles::theorem1_case(seed, id, wrong ? oracles::StopBranch::Wrong : oracles::StopBranch::Correct);
        record("theorem1", id, "max_rel_diff", c.max_rel_diff, c.pass);
    }
    Rng jrng(derive_seed(seed, 3));
    for (std::size_t id = 0; id < cases; ++id) {
        const std::size_t b = std::uniform_int_distribution<std::size_t>(2, 64)(jrng);
        Tensor l(Shape{b});
        for (double& v : l.values()) v = 1.0 / (1.0 + std::exp(-3.0 * standard_normal(jrng)));
        double s1 = 0.0, s0 = 0.0;
        for (double v : l.values()) {
            s1 += v;
            s0 += 1.0 - v;
        }
        Tensor q0(l.shape()), q1(l.shape());
        for (std::size_t i = 0; i < b; ++i) {
            q1[i] = l[i] / s1;
            q0[i] = (1.0 - l[i]) / s0;
        }
        const double d = std::abs(dml_binary_objective(l) - oracles::js_divergence_discrete(q0, q1));
        record("js", id, "max_abs_diff", d, d <= 1e-10);
    }
    for (std::size_t id = 0; id < cases; ++id) {
        const double r = dml_fd_case(seed, id);
        record("finite_diff", id, "max_rel_diff", r, r <= 1e-4);
    }
    report["suites"] = suites;
    report["pass"] = failing.empty();
    const std::string text = report.dump(2) + "\n";
    const std::string out = cfg["out"];
    if (out.empty()) {
        std::cout << text;
    } else {
        write_text(out, text);
    }
    for (const auto& [suite, ids] : failing) {
        std::string list;
        for (std::size_t id : ids) list += (list.empty() ? "" : ",") + std::to_string(id);
        std::cerr << "FAIL " << suite << " cases [" << list << "]\n";
    }
    return failing.empty() ? 0 : 1;
}

// ------------------------------------------------------------------ export-grid

json grid_defaults() {
    return {{"checkpoint", ""}, {"data", ""}, {"resolution", 200u}, {"out", ""}};
}

int cmd_export_grid(const json& cfg) {
    const std::string ckpt = cfg["checkpoint"], out = cfg["out"];
    if (ckpt.empty() || out.empty()) throw UsageError("--checkpoint and --out are required");
    const auto res = cfg["resolution"].get<std::size_t>();
    if (res < 2) throw UsageError("--resolution must be at least 2");
    CheckpointMeta meta;
    const Network net = load_checkpoint(ckpt, &meta);
    const json extra = json::parse(meta.extra_json);
    ManifoldDataset ds = load_data(cfg["data"]);
    ManifoldDataset lift;
    if (extra.contains("lift") && !extra["lift"].is_null()) {
        lift.base_dim = extra["lift"]["base_dim"];
        lift.lift_dim = extra["lift"]["dim"];
        lift.lift_seed = extra["lift"]["seed"];
    }
    // Base-space coordinates of the data.
    Tensor base;
    if (lift.lift_dim) {
        if (lift.base_dim != 2) throw UsageError("export-grid needs two-dimensional base data");
        if (ds.dim() != lift.lift_dim) throw UsageError("data dimension does not match the stored lift");
        const Tensor r = orthogonal_init(lift.lift_dim, lift.lift_dim, lift.lift_seed);
        base = Tensor(Shape{ds.size(), 2});
        for (std::size_t i = 0; i < ds.size(); ++i) {
            for (std::size_t b = 0; b < 2; ++b) {
                double s = 0.0;
                for (std::size_t a = 0; a < lift.lift_dim; ++a) s += r.at(a, b) * ds.points.at(i, a);
                base.at(i, b) = s;
            }
        }
    } else if (ds.dim() == 2) {
        base = ds.points;
    } else {
        throw UsageError("data is " + std::to_string(ds.dim()) + "-dimensional and the checkpoint stores no lift");
    }
    double lo[2] = {INFINITY, INFINITY}, hi[2] = {-INFINITY, -INFINITY};
    for (std::size_t i = 0; i < base.rows(); ++i) {
        for (std::size_t c = 0; c < 2; ++c) {
            lo[c] = std::min(lo[c], base.at(i, c));
            hi[c] = std::max(hi[c], base.at(i, c));
        }
    }
    Tensor grid(Shape{res * res, 2});
    for (std::size_t iy = 0; iy < res; ++iy) {
        for (std::size_t ix = 0; ix < res; ++ix) {
            grid.at(iy * res + ix, 0) = lo[0] + (hi[0] - lo[0]) * static_cast<double>(ix) / static_cast<double>(res - 1);
            grid.at(iy * res + ix, 1) = lo[1] + (hi[1] - lo[1]) * static_cast<double>(iy) / static_cast<double>(res - 1);
        }
    }
    ManifoldDataset g;
    g.points = lift.lift_dim ? apply_lift(lift, grid) : grid;
    g.components.assign(res * res, 0);
    if (extra.contains("standardizer")) g = standardize_with(g, standardizer_from(extra["standardizer"]));
    const Tensor probs = predict_all(net, g);
    // For binary heads argmax is the 0.5 threshold on the first column.
    const std::vector<int> labels = argmax_labels(probs);
    std::ostringstream csv;
    csv.precision(17);
    csv << "x,y,argmax_label,max_prob\n";
    for (std::size_t i = 0; i < res * res; ++i) {
        csv << grid.at(i, 0) << ',' << grid.at(i, 1) << ',' << labels[i] << ','
            << probs.at(i, static_cast<std::size_t>(labels[i])) << '\n';
    }
    write_text(out, csv.str());
    note("wrote " + std::to_string(res * res) + " grid points to " + out);
    return 0;
}

// ------------------------------------------------------------------ dispatch

int run_with_sweep(const RunConfig& rc, const std::string& sweep_path, const json* preset,
                   const std::function<int(const json&)>& fn) {
    if (sweep_path.empty()) return fn(rc.resolve(nullptr, preset));
    const json list = read_json(sweep_path);
    if (!list.is_array() || list.empty()) throw UsageError(sweep_path + ": expected a non-empty JSON list of configs");
    int worst = 0;
    for (std::size_t i = 0; i < list.size(); ++i) {
        json cfg = rc.resolve(&list[i], preset);
        char name[32];
        std::snprintf(name, sizeof name, "run-%03zu", i);
        cfg["out_dir"] = (fs::path(cfg["out_dir"].get<std::string>()) / name).string();
        note("sweep " + std::to_string(i + 1) + "/" + std::to_string(list.size()) + ": " + list[i].dump());
        worst = std::max(worst, fn(cfg));
    }
    return worst;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Neural Bayes: MIM and DML training, oracle checks and exports"};
    app.require_subcommand(1);
    app.add_flag("-q,--quiet", g_quiet, "suppress progress messages");

    struct Command {
        CLI::App* app;
        RunConfig rc;
    };
    std::map<std::string, Command> cmds;
    auto add = [&](const std::string& name, const std::string& help, json defaults) -> Command& {
        Command& c = cmds[name];
        c.app = app.add_subcommand(name, help);
        c.rc.defaults = std::move(defaults);
        c.rc.bind(c.app);
        return c;
    };
    add("gen-data", "write a synthetic point cloud CSV plus JSON metadata", gen_defaults());
    std::string dml_sweep, mim_sweep, preset_name;
    add("train-dml", "train a disjoint-manifold labeler", dml_defaults())
        .app->add_option("--sweep", dml_sweep, "JSON list of configs run one after another");
    cmds["train-dml"].app->add_option("--preset", preset_name, "mnist-cnn: batch 5000, beta 1, 100 epochs, small CNN");
    add("train-mim", "train an encoder by mutual information maximization", mim_defaults())
        .app->add_option("--sweep", mim_sweep, "JSON list of configs run one after another");
    add("probe", "train a probe classifier on frozen features of a checkpoint", probe_defaults());
    add("gradcheck", "run the oracle suite", gradcheck_defaults());
    add("export-grid", "evaluate a 2-D classifier on a grid and write CSV", grid_defaults());

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (cmds["gen-data"].app->parsed()) return cmd_gen_data(cmds["gen-data"].rc.resolve());
        if (cmds["train-dml"].app->parsed()) {
            const json preset = dml_preset(preset_name);
            return run_with_sweep(cmds["train-dml"].rc, dml_sweep, &preset, cmd_train_dml);
        }
        if (cmds["train-mim"].app->parsed()) return run_with_sweep(cmds["train-mim"].rc, mim_sweep, nullptr, cmd_train_mim);
        if (cmds["probe"].app->parsed()) return cmd_probe(cmds["probe"].rc.resolve());
        if (cmds["gradcheck"].app->parsed()) return cmd_gradcheck(cmds["gradcheck"].rc.resolve());
        if (cmds["export-grid"].app->parsed()) return cmd_export_grid(cmds["export-grid"].rc.resolve());
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
