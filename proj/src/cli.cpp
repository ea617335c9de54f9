#include "latentbank/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "latentbank/protocol.hpp"

namespace latentbank::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Everything a run can configure, with hard defaults. File values override
// defaults, LATENTBANK_SEED overrides the file, flags override everything.
struct RunConfig {
    // backbone
    int vocab_size = 64;
    int d = 32;
    int n_layers_enc = 2;
    int n_layers_dec = 2;
    int n_heads = 2;
    int max_len = 64;
    // memory
    std::string capacity = "full"; // full | 1x | 10x
    int n_p = 64;
    double gamma = 0.95;
    int d_h = 0;
    int slots = 64;
    int top_k = 8;
    int prefix_m = 0;
    double gate_bias_init = -4.0;
    // training
    double lr = 1e-4;
    double weight_decay = 1e-2;
    int warmup_steps = 200;
    double grad_clip = 1.0;
    int epochs = 10;
    int batch = 2;
    int grad_accum = 8;
    int tbptt_window = 8;
    // evaluation
    double eps = kDefaultEvalEps;
    int max_answer_steps = 4;
    int knowledge_conversations = 10;
    // shared
    uint64_t seed = 42;

    BackboneConfig backbone() const {
        BackboneConfig cfg;
        cfg.vocab_size = vocab_size;
        cfg.d = d;
        cfg.n_layers_enc = n_layers_enc;
        cfg.n_layers_dec = n_layers_dec;
        cfg.n_heads = n_heads;
        cfg.max_len = max_len;
        cfg.seed = seed;
        return cfg;
    }

    MemoryHyper hyper() const {
        MemoryHyper h;
        if (capacity == "1x")
            h = MemoryHyper::toy(1);
        else if (capacity == "10x")
            h = MemoryHyper::toy(10);
        else if (capacity != "full")
            throw ContractError("capacity must be one of full, 1x, 10x");
        if (capacity == "full") {
            h.n_p = n_p;
            h.d_h = d_h;
            h.slots = slots;
            h.top_k = top_k;
        }
        h.gamma = gamma;
        h.prefix_m = prefix_m;
        h.gate_bias_init = gate_bias_init;
        return h;
    }

    TrainConfig train() const {
        TrainConfig t;
        t.lr = lr;
        t.weight_decay = weight_decay;
        t.warmup_steps = warmup_steps;
        t.grad_clip = grad_clip;
        t.epochs = epochs;
        t.batch = batch;
        t.grad_accum = grad_accum;
        t.tbptt_window = tbptt_window;
        t.seed = seed;
        return t;
    }

    json to_json() const {
        return {{"vocab_size", vocab_size},
                {"d", d},
                {"n_layers_enc", n_layers_enc},
                {"n_layers_dec", n_layers_dec},
                {"n_heads", n_heads},
                {"max_len", max_len},
                {"capacity", capacity},
                {"n_p", n_p},
                {"gamma", gamma},
                {"d_h", d_h},
                {"slots", slots},
                {"top_k", top_k},
                {"prefix_m", prefix_m},
                {"gate_bias_init", gate_bias_init},
                {"lr", lr},
                {"weight_decay", weight_decay},
                {"warmup_steps", warmup_steps},
                {"grad_clip", grad_clip},
                {"epochs", epochs},
                {"batch", batch},
                {"grad_accum", grad_accum},
                {"tbptt_window", tbptt_window},
                {"eps", eps},
                {"max_answer_steps", max_answer_steps},
                {"knowledge_conversations", knowledge_conversations},
                {"seed", seed}};
    }

    void apply_json(const json& j) {
        auto get = [&j](const char* key, auto& slot) {
            if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
        };
        get("vocab_size", vocab_size);
        get("d", d);
        get("n_layers_enc", n_layers_enc);
        get("n_layers_dec", n_layers_dec);
        get("n_heads", n_heads);
        get("max_len", max_len);
        get("capacity", capacity);
        get("n_p", n_p);
        get("gamma", gamma);
        get("d_h", d_h);
        get("slots", slots);
        get("top_k", top_k);
        get("prefix_m", prefix_m);
        get("gate_bias_init", gate_bias_init);
        get("lr", lr);
        get("weight_decay", weight_decay);
        get("warmup_steps", warmup_steps);
        get("grad_clip", grad_clip);
        get("epochs", epochs);
        get("batch", batch);
        get("grad_accum", grad_accum);
        get("tbptt_window", tbptt_window);
        get("eps", eps);
        get("max_answer_steps", max_answer_steps);
        get("knowledge_conversations", knowledge_conversations);
        get("seed", seed);
    }
};

RunConfig preload_config(const std::vector<std::string>& args) {
    RunConfig rc;
    for (size_t i = 0; i + 1 < args.size(); ++i) {
        if (args[i] == "--config") {
            std::ifstream in(args[i + 1]);
            if (!in) throw IoError("cannot open config file: " + args[i + 1]);
            json j;
            try {
                in >> j;
            } catch (const json::exception& e) {
                throw IoError("config parse error: " + std::string(e.what()));
            }
            rc.apply_json(j);
        }
    }
    // flag beats env, env beats file: env is applied after the file and the
    // flag parser runs later
    if (const char* env = std::getenv("LATENTBANK_SEED")) {
        try {
            rc.seed = std::stoull(env);
        } catch (...) {
            throw ContractError("LATENTBANK_SEED is not an integer");
        }
    }
    return rc;
}

void echo_config(const RunConfig& rc, const std::string& out_dir,
                 const std::string& command) {
    fs::create_directories(out_dir);
    json j = rc.to_json();
    j["command"] = command;
    std::string path = out_dir + "/config.json";
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write config echo: " + tmp);
        out << j.dump(2) << '\n';
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename config echo onto " + path);
}

MethodId parse_method_or_throw(const std::string& name) {
    MethodId m;
    if (!parse_method(name, m)) {
        std::string valid;
        for (MethodId v : all_methods()) valid += (valid.empty() ? "" : ", ") + method_name(v);
        throw CLI::ValidationError("--method", "unknown method '" + name +
                                                   "' (valid: " + valid + ")");
    }
    return m;
}

void write_text(const std::string& path, const std::string& text) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out << text;
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename onto " + path);
}

std::vector<TokenizedConversation> tokenize_all(const std::vector<Conversation>& convs,
                                                const Tokenizer& tok) {
    std::vector<TokenizedConversation> out;
    out.reserve(convs.size());
    for (const auto& c : convs) out.push_back(tokenize_conversation(c, tok));
    return out;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& rc, const std::string& method_name_arg,
              const std::string& corpus_path, const std::string& out_dir) {
    MethodId method = parse_method_or_throw(method_name_arg);
    std::vector<Conversation> convs;
    try {
        convs = load_json(corpus_path);
    } catch (const std::exception& e) {
        std::cerr << "corpus error: " << e.what() << "\n";
        return kExitCorpus;
    }
    echo_config(rc, out_dir, "train");
    BackboneConfig bcfg = rc.backbone();
    auto backbone = FrozenBackbone<float>::init_frozen(bcfg);
    Tokenizer tok = Tokenizer::build(convs, bcfg.vocab_size, rc.seed);
    save_tokenizer(tok, out_dir + "/tokenizer.json");
    try {
        auto result = type1_train(backbone, method, tokenize_all(convs, tok), rc.hyper(),
                                  rc.train());
        save_params(result.params, bcfg, out_dir + "/params.lmp");
        write_text(out_dir + "/trace.csv", trace_to_csv(result.trace));
    } catch (const TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitDiverged;
    }
    std::cout << "trained " << method_name(method) << " on " << convs.size()
              << " conversations -> " << out_dir << "\n";
    return kExitOk;
}

int cmd_accumulate(const RunConfig& rc, const std::string& params_path,
                   const std::string& tokenizer_path, const std::string& corpus_path,
                   const std::string& out_path, const std::string& resume_path,
                   int skip_sessions, int max_sessions) {
    LoadedParams loaded;
    Tokenizer tok = Tokenizer::from_words({"<pad>", "<end>", "<unk>", "x"});
    std::vector<Conversation> convs;
    try {
        loaded = load_params(params_path);
        tok = load_tokenizer(tokenizer_path);
        convs = load_json(corpus_path);
    } catch (const std::exception& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitCorpus;
    }
    auto backbone = FrozenBackbone<float>::init_frozen(loaded.backbone);
    MemoryState<float> state =
        zero_state<float>(loaded.params.method, loaded.params.hyper, loaded.backbone.d);
    if (!resume_path.empty()) {
        try {
            LoadedBank bank = load_bank(resume_path, loaded.params.method);
            if (!bank.state.mem.same_shape(state.mem)) {
                std::cerr << "bank/params dimension mismatch: bank " << bank.state.mem.rows()
                          << "x" << bank.state.mem.cols() << ", params expect "
                          << state.mem.rows() << "x" << state.mem.cols() << "\n";
                return kExitDimMismatch;
            }
            state = bank.state;
        } catch (const IoError& e) {
            std::cerr << "resume error: " << e.what() << "\n";
            return kExitCorpus;
        }
    }
    // sessions flattened across conversations in file order
    int session_index = 0;
    for (const auto& conv : convs) {
        TokenizedConversation tc = tokenize_conversation(conv, tok);
        int t = 0;
        for (int s = 0; s < tc.n_sessions(); ++s) {
            int count = tc.session_turn_count[static_cast<size_t>(s)];
            bool in_range = session_index >= skip_sessions &&
                            (max_sessions < 0 || session_index < skip_sessions + max_sessions);
            if (in_range) {
                std::vector<std::vector<int>> turns(
                    tc.turn_tokens.begin() + t, tc.turn_tokens.begin() + t + count);
                state = type2_accumulate(backbone, loaded.params, state, turns);
            }
            t += count;
            ++session_index;
        }
    }
    (void)rc;
    save_bank(state, loaded.params.hyper.capacity_scale, out_path);
    std::cout << "accumulated " << state.turn_counter << " turns -> " << out_path << "\n";
    return kExitOk;
}

int cmd_evaluate(const RunConfig& rc, const std::vector<std::string>& params_paths,
                 const std::string& tokenizer_path, const std::string& corpus_path,
                 const std::string& out_dir,
                 const std::vector<std::string>& bank_specs) {
    std::vector<Conversation> convs;
    std::vector<LoadedParams> loaded;
    Tokenizer tok = Tokenizer::from_words({"<pad>", "<end>", "<unk>", "x"});
    std::map<std::string, std::string> bank_by_method;
    try {
        convs = load_json(corpus_path);
        tok = load_tokenizer(tokenizer_path);
        for (const auto& p : params_paths) loaded.push_back(load_params(p));
        for (const auto& spec : bank_specs) {
            auto eq = spec.find('=');
            if (eq == std::string::npos)
                throw ContractError("--bank expects method=path, got: " + spec);
            bank_by_method[spec.substr(0, eq)] = spec.substr(eq + 1);
        }
    } catch (const std::exception& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitCorpus;
    }
    echo_config(rc, out_dir, "evaluate");

    BackboneConfig bcfg = loaded.empty() ? rc.backbone() : loaded.front().backbone;
    for (const auto& lp : loaded)
        if (lp.backbone.d != bcfg.d || lp.backbone.vocab_size != bcfg.vocab_size ||
            lp.backbone.seed != bcfg.seed) {
            std::cerr << "params files disagree on the backbone configuration\n";
            return kExitDimMismatch;
        }
    auto backbone = FrozenBackbone<float>::init_frozen(bcfg);

    std::vector<MethodUnderTest<float>> methods;
    int capacity_scale = 0;
    for (auto& lp : loaded) {
        MethodUnderTest<float> mut;
        mut.params = std::move(lp.params);
        capacity_scale = mut.params.hyper.capacity_scale;
        auto it = bank_by_method.find(method_name(mut.params.method));
        if (it != bank_by_method.end()) {
            try {
                LoadedBank bank = load_bank(it->second, mut.params.method);
                MemoryState<float> expect = zero_state<float>(
                    mut.params.method, mut.params.hyper, bcfg.d);
                if (!bank.state.mem.same_shape(expect.mem)) {
                    std::cerr << "bank/params dimension mismatch for "
                              << method_name(mut.params.method) << "\n";
                    return kExitDimMismatch;
                }
                mut.initial_state = bank.state;
            } catch (const IoError& e) {
                std::cerr << "bank error: " << e.what() << "\n";
                return kExitCorpus;
            }
        }
        methods.push_back(std::move(mut));
    }

    ProtocolConfig pc;
    pc.eps = rc.eps;
    pc.max_answer_steps = rc.max_answer_steps;
    pc.knowledge_conversations = rc.knowledge_conversations;
    pc.capacity_scale = capacity_scale;
    pc.seed = rc.seed;
    EvalReport report =
        run_protocol(backbone, methods, tokenize_all(convs, tok), tok, pc);
    write_report(report, out_dir + "/report.json");
    write_curves_csv(report, out_dir + "/curves.csv");
    std::cout << "evaluated " << report.methods.size() << " methods on " << convs.size()
              << " conversations -> " << out_dir << "\n";
    return kExitOk;
}

int cmd_generate(const SyntheticSpec& base, int n_conversations, const std::string& out_path) {
    std::vector<Conversation> convs;
    SyntheticSpec spec = base;
    for (int i = 0; i < n_conversations; ++i) {
        spec.seed = base.seed + static_cast<uint64_t>(i);
        convs.push_back(generate_synthetic(spec));
    }
    save_json(convs, out_path);
    std::cout << "generated " << n_conversations << " conversations -> " << out_path << "\n";
    return kExitOk;
}

} // namespace

int run(const std::vector<std::string>& args) {
    try {
        RunConfig rc = preload_config(args);

        CLI::App app{"latent persistent-memory adapters over a frozen encoder-decoder"};
        app.require_subcommand(1);
        std::string config_path;
        app.add_option("--config", config_path, "JSON config file (flags override it)");

        auto add_shared = [&rc](CLI::App* cmd) {
            cmd->add_option("--seed", rc.seed);
            cmd->add_option("--capacity", rc.capacity)
                ->check(CLI::IsMember({"full", "1x", "10x"}));
            cmd->add_option("--gamma", rc.gamma);
            cmd->add_option("--n-p", rc.n_p);
            cmd->add_option("--d-h", rc.d_h);
            cmd->add_option("--slots", rc.slots);
            cmd->add_option("--top-k", rc.top_k);
            cmd->add_option("--gate-bias-init", rc.gate_bias_init);
            cmd->add_option("--d", rc.d);
            cmd->add_option("--vocab-size", rc.vocab_size);
            cmd->add_option("--max-len", rc.max_len);
        };

        // train
        auto* train = app.add_subcommand("train", "type-1 training of one method");
        std::string method_arg, corpus_path, out_dir;
        train->add_option("--method", method_arg)->required();
        train->add_option("--corpus", corpus_path)->required();
        train->add_option("--out", out_dir)->required();
        train->add_option("--lr", rc.lr);
        train->add_option("--weight-decay", rc.weight_decay);
        train->add_option("--warmup-steps", rc.warmup_steps);
        train->add_option("--grad-clip", rc.grad_clip);
        train->add_option("--epochs", rc.epochs);
        train->add_option("--batch", rc.batch);
        train->add_option("--grad-accum", rc.grad_accum);
        train->add_option("--tbptt-window", rc.tbptt_window);
        add_shared(train);

        // accumulate
        auto* acc = app.add_subcommand("accumulate", "type-2 gradient-free accumulation");
        std::string params_path, tokenizer_path, bank_out, resume_path;
        int skip_sessions = 0, max_sessions = -1;
        acc->add_option("--params", params_path)->required();
        acc->add_option("--tokenizer", tokenizer_path)->required();
        acc->add_option("--corpus", corpus_path)->required();
        acc->add_option("--out", bank_out)->required();
        acc->add_option("--resume", resume_path);
        acc->add_option("--skip-sessions", skip_sessions);
        acc->add_option("--max-sessions", max_sessions);

        // evaluate
        auto* ev = app.add_subcommand("evaluate", "forgetting-curve protocol");
        std::vector<std::string> params_paths, bank_specs;
        ev->add_option("--params", params_paths);
        ev->add_option("--tokenizer", tokenizer_path)->required();
        ev->add_option("--corpus", corpus_path)->required();
        ev->add_option("--out", out_dir)->required();
        ev->add_option("--bank", bank_specs, "method=path starting state");
        ev->add_option("--eps", rc.eps);
        ev->add_option("--max-answer-steps", rc.max_answer_steps);
        ev->add_option("--knowledge-conversations", rc.knowledge_conversations);
        add_shared(ev);

        // generate
        auto* gen = app.add_subcommand("generate", "write a synthetic corpus");
        SyntheticSpec spec;
        int n_conversations = 10;
        std::string gen_out;
        gen->add_option("--out", gen_out)->required();
        gen->add_option("--conversations", n_conversations);
        gen->add_option("--sessions", spec.n_sessions);
        gen->add_option("--turns-per-session", spec.turns_per_session);
        gen->add_option("--facts", spec.n_facts);
        gen->add_option("--distractor-ratio", spec.distractor_ratio);
        gen->add_option("--lag-distribution", spec.lag_distribution);
        gen->add_option("--gen-seed", spec.seed);

        std::vector<std::string> argv_copy = args;
        std::vector<const char*> argv_c;
        argv_c.push_back("latentbank");
        for (const auto& a : argv_copy) argv_c.push_back(a.c_str());
        try {
            app.parse(static_cast<int>(argv_c.size()), argv_c.data());
        } catch (const CLI::CallForHelp& e) {
            std::cout << app.help();
            return kExitOk;
        } catch (const CLI::ParseError& e) {
            std::cerr << e.what() << "\n";
            return kExitBadFlags;
        }

        if (train->parsed()) return cmd_train(rc, method_arg, corpus_path, out_dir);
        if (acc->parsed())
            return cmd_accumulate(rc, params_path, tokenizer_path, corpus_path, bank_out,
                                  resume_path, skip_sessions, max_sessions);
        if (ev->parsed())
            return cmd_evaluate(rc, params_paths, tokenizer_path, corpus_path, out_dir,
                                bank_specs);
        if (gen->parsed()) {
            if (std::getenv("LATENTBANK_SEED") && spec.seed == SyntheticSpec{}.seed)
                spec.seed = rc.seed;
            if (gen->count("--lag-distribution") == 0) {
                // default mass confined to buckets the conversation can reach
                for (size_t b = 0; b < spec.lag_bucket_bounds.size(); ++b)
                    if (spec.lag_bucket_bounds[b] >= spec.total_turns())
                        spec.lag_distribution[b] = 0.0;
            }
            return cmd_generate(spec, n_conversations, gen_out);
        }
        return kExitBadFlags;
    } catch (const CLI::ValidationError& e) {
        std::cerr << e.what() << "\n";
        return kExitBadFlags;
    } catch (const TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const CorpusError& e) {
        std::cerr << "corpus error: " << e.what() << "\n";
        return kExitCorpus;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitCorpus;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitBadFlags;
    }
}

} // namespace latentbank::cli
