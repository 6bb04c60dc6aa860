#include "run_config.hpp"

#include "miniprune/dataio.hpp"
#include "miniprune/error.hpp"
#include "miniprune/pruner.hpp"

namespace miniprune::cli {

using nlohmann::json;

json default_config() {
    return json::parse(R"({
  "model": {
    "vocab_size": 256, "d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 256,
    "ffn_kind": "gelu2", "max_seq_len": 128, "tie_embeddings": false, "init_seed": 0
  },
  "data": { "corpus_path": "", "split": 0.9 },
  "pretrain": {
    "steps": 2000, "batch_size": 16, "seq_len": 127, "lr": 0.003, "warmup_steps": 100,
    "grad_clip": 1.0, "seed": 0, "log_every": 50
  },
  "zo": { "epsilon": 0.001, "n_samples": 1, "distribution": "gaussian", "seed": 0, "clamp": false },
  "prune": {
    "ratio": 0.2, "criterion": "fms_zo", "protect": { "first": 1, "last": 1 }, "seed": 0,
    "grad_samples": 10, "act_samples": 128, "calib_len": 128, "dump_scores": false
  },
  "recover": {
    "optimizer": "adamw", "lr": 0.0001, "epochs": 2, "batch_size": 64, "seq_len": 127, "max_steps": 0,
    "r": 8, "alpha": 16.0, "literal_scale": false, "seed": 0, "targets": []
  },
  "eval": { "context_length": 128, "max_windows": 0 },
  "compare": {
    "criteria": ["magnitude_l2", "wanda", "taylor_zo", "fms_zo"], "ratios": [0.2], "seeds": [0, 1, 2],
    "recover": true
  }
})");
}

namespace {

bool same_kind(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

json& locate(json& config, const std::string& dotted) {
    json* node = &config;
    std::size_t start = 0;
    for (;;) {
        const std::size_t dot = dotted.find('.', start);
        const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown config key '" + dotted + "'");
        node = &(*node)[key];
        if (dot == std::string::npos) return *node;
        start = dot + 1;
    }
}

template <class T>
T get(const json& c, const char* section, const char* key) {
    try {
        return c.at(section).at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for ") + section + "." + key + ": " + e.what());
    }
}

}  // namespace

void merge_config(json& base, const json& user, const std::string& path) {
    if (!user.is_object()) throw ConfigError("config " + (path.empty() ? "document" : "section '" + path + "'") +
                                             " must be a JSON object");
    for (const auto& [key, value] : user.items()) {
        const std::string full = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key '" + full + "'");
        json& slot = base[key];
        if (slot.is_object()) {
            merge_config(slot, value, full);
        } else {
            if (!same_kind(slot, value)) throw ConfigError("config key '" + full + "' expects " + slot.type_name());
            slot = value;
        }
    }
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json& slot = locate(config, key);
    if (slot.is_object()) {
        merge_config(slot, value, key);
        return;
    }
    if (!same_kind(slot, value)) throw ConfigError("config key '" + key + "' expects " + slot.type_name());
    slot = value;
}

json load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
    json config = default_config();
    if (!file.empty()) {
        json user = json::parse(read_text(file), nullptr, false);
        if (user.is_discarded()) throw ConfigError("config file '" + file.string() + "' is not valid JSON");
        merge_config(config, user);
    }
    for (const auto& o : overrides) apply_override(config, o);
    validate_run_config(config);
    return config;
}

ModelConfig model_config(const json& c) {
    json m = c.at("model");
    m.erase("init_seed");
    return config_from_json(m);
}

zo::PerturbSpec perturb_spec(const json& c) {
    zo::PerturbSpec s;
    s.epsilon = get<float>(c, "zo", "epsilon");
    s.n_samples = get<int>(c, "zo", "n_samples");
    s.distribution = distribution_from_string(get<std::string>(c, "zo", "distribution"));
    s.base_seed = get<std::uint64_t>(c, "zo", "seed");
    s.clamp = get<bool>(c, "zo", "clamp");
    s.validate();
    return s;
}

TrainConfig pretrain_config(const json& c) {
    TrainConfig t;
    t.learning_rate = get<double>(c, "pretrain", "lr");
    t.max_steps = get<std::int64_t>(c, "pretrain", "steps");
    t.batch_size = get<int>(c, "pretrain", "batch_size");
    t.seq_len = get<int>(c, "pretrain", "seq_len");
    t.warmup_steps = get<std::int64_t>(c, "pretrain", "warmup_steps");
    t.grad_clip = get<double>(c, "pretrain", "grad_clip");
    t.seed = get<std::uint64_t>(c, "pretrain", "seed");
    t.epochs = 1;
    if (t.max_steps < 1) throw ConfigError("pretrain.steps must be >= 1");
    t.validate();
    return t;
}

TrainConfig recover_config(const json& c) {
    TrainConfig t;
    t.optimizer = optimizer_from_string(get<std::string>(c, "recover", "optimizer"));
    t.learning_rate = get<double>(c, "recover", "lr");
    t.epochs = get<int>(c, "recover", "epochs");
    t.batch_size = get<int>(c, "recover", "batch_size");
    t.seq_len = get<int>(c, "recover", "seq_len");
    t.max_steps = get<std::int64_t>(c, "recover", "max_steps");
    t.seed = get<std::uint64_t>(c, "recover", "seed");
    t.zo = perturb_spec(c);
    t.validate();
    return t;
}

LoraOptions lora_options(const json& c) {
    LoraOptions o;
    o.r = get<int>(c, "recover", "r");
    o.alpha = get<float>(c, "recover", "alpha");
    o.literal_scale = get<bool>(c, "recover", "literal_scale");
    o.seed = get<std::uint64_t>(c, "recover", "seed");
    if (o.r <= 0 || !(o.alpha > 0.0f)) throw ConfigError("recover.r and recover.alpha must be positive");
    return o;
}

MiniLlmOptions prune_options(const json& c, const ModelConfig& model) {
    MiniLlmOptions o;
    o.criterion = criterion_from_string(get<std::string>(c, "prune", "criterion"));
    o.ratio = get<double>(c, "prune", "ratio");
    const json& protect = c.at("prune").at("protect");
    o.protected_layers = protected_layer_set(model.n_layers, protect.at("first").get<int>(), protect.at("last").get<int>());
    o.zo = perturb_spec(c);
    return o;
}

CompareSpec compare_spec(const json& c, const ModelConfig& model) {
    CompareSpec s;
    for (const auto& name : c.at("compare").at("criteria")) s.criteria.push_back(criterion_from_string(name.get<std::string>()));
    s.ratios = c.at("compare").at("ratios").get<std::vector<double>>();
    s.seeds = c.at("compare").at("seeds").get<std::vector<std::uint64_t>>();
    s.recover = c.at("compare").at("recover").get<bool>();
    const json& protect = c.at("prune").at("protect");
    s.protect_first = protect.at("first").get<int>();
    s.protect_last = protect.at("last").get<int>();
    s.zo = perturb_spec(c);
    s.grad_samples = get<int>(c, "prune", "grad_samples");
    s.act_samples = get<int>(c, "prune", "act_samples");
    s.calib_len = get<int>(c, "prune", "calib_len");
    s.train = recover_config(c);
    s.lora = lora_options(c);
    s.context_length = get<int>(c, "eval", "context_length");
    s.max_windows = get<std::int64_t>(c, "eval", "max_windows");
    (void)model;
    return s;
}

void validate_run_config(const json& c) {
    const ModelConfig m = model_config(c);
    perturb_spec(c);
    pretrain_config(c);
    recover_config(c);
    lora_options(c);
    prune_options(c, m);
    compare_spec(c, m);
    const double split = get<double>(c, "data", "split");
    if (!(split > 0.0 && split < 1.0)) throw ConfigError("data.split must lie in (0, 1)");
    const double ratio = get<double>(c, "prune", "ratio");
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("prune.ratio must lie in [0, 1)");
    for (double r : c.at("compare").at("ratios").get<std::vector<double>>())
        if (!(r >= 0.0 && r < 1.0)) throw ConfigError("compare.ratios entries must lie in [0, 1)");
    const int ctx = get<int>(c, "eval", "context_length");
    if (ctx < 2) throw ConfigError("eval.context_length must be >= 2");
    for (const char* k : {"grad_samples", "act_samples", "calib_len"})
        if (get<int>(c, "prune", k) < 1) throw ConfigError(std::string("prune.") + k + " must be positive");
    const json& protect = c.at("prune").at("protect");
    if (protect.at("first").get<int>() < 0 || protect.at("last").get<int>() < 0)
        throw ConfigError("prune.protect counts must be non-negative");
}

}  // namespace miniprune::cli
