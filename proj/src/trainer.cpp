#include "bitmar/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bitmar/checkpoint.hpp"
#include "bitmar/ops.hpp"

namespace bitmar {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over (seed, stream)
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::string format_metrics(const StepMetrics& m) {
    char buf[512];
    char align[32];
    if (m.alignment) {
        std::snprintf(align, sizeof align, "%.6f", *m.alignment);
    } else {
        std::snprintf(align, sizeof align, "na");
    }
    std::snprintf(buf, sizeof buf,
                  "step=%llu L_lm=%.6f L_cm=%.6f L_mem=%.6g total=%.6f alignment=%s E_q=%.6f mem_entropy=%.6f lr=%.6g "
                  "intervention=%s",
                  static_cast<unsigned long long>(m.step), m.lm, m.cm, m.mem, m.total, align, m.eq, m.mem_entropy, m.lr,
                  intervention_name(m.active).c_str());
    return buf;
}

Trainer::Trainer(BitMarModel& model, const RunConfig& config)
    : model_(model),
      config_(config),
      optimizer_(model.registry().params, config.optim.adamw),
      schedule_{config.optim.lr, config.optim.t0, config.optim.t_mult, config.optim.eta_min_ratio},
      controller_(config.controller, derive_seed(config.seed, 3)),
      dropout_rng_(derive_seed(config.seed, 2)) {}

void Trainer::attach_dataset(std::size_t dataset_size) {
    if (!sampler_ready_) sampler_ = BatchSampler(dataset_size, derive_seed(config_.seed, 1));
    sampler_ready_ = true;
}

void Trainer::set_sampler(BatchSampler s) {
    sampler_ = std::move(s);
    sampler_ready_ = true;
}

StepMetrics Trainer::train_step(std::span<const Batch> micro_batches) {
    if (micro_batches.empty()) throw std::invalid_argument("train_step: no micro-batches");
    model_.set_training(true);
    ForwardContext ctx{true, &dropout_rng_};
    const std::size_t n_micro = micro_batches.size();

    std::vector<ForwardOutput> outs;
    outs.reserve(n_micro);
    double align_sum = 0.0;
    std::size_t align_count = 0;
    for (const auto& b : micro_batches) {
        outs.push_back(model_.forward(b, ctx, {true, true}));
        if (outs.back().alignment) {
            align_sum += *outs.back().alignment * static_cast<double>(outs.back().multimodal);
            align_count += outs.back().multimodal;
        }
    }
    std::optional<double> alignment;
    if (align_count > 0) alignment = align_sum / static_cast<double>(align_count);

    Controller::Decision decision;
    if (config_.controller_enabled) decision = controller_.step(alignment);
    LossWeights weights = config_.loss;
    weights.cm *= controller_.cm_multiplier();

    StepMetrics m;
    const float inv = 1.0f / static_cast<float>(n_micro);
    for (auto& o : outs) {
        Tensor total;
        try {
            total = total_loss(o.lm, o.cm, o.mem, weights);
        } catch (const std::domain_error& e) {
            optimizer_.zero_grad();
            throw TrainingAborted("step " + std::to_string(step_ + 1) + ": " + e.what());
        }
        m.lm += o.lm.item() / n_micro;
        m.cm += o.cm.item() / n_micro;
        m.mem += o.mem.item() / n_micro;
        m.total += total.item() / n_micro;
        scale(total, inv).backward();
    }

    const double lr = schedule_.lr_at(step_);
    const bool freeze_text = controller_.text_frozen();
    const bool freeze_vision = controller_.vision_frozen();
    optimizer_.step(static_cast<float>(lr), [&](std::size_t i) {
        const auto g = model_.group_of(i);
        return (freeze_text && g == ParamGroup::text) || (freeze_vision && g == ParamGroup::vision);
    });
    optimizer_.zero_grad();
    for (auto& [name, layer] : model_.registry().linears) layer->clamp_scale();

    // Episodic write with the batch-mean query, after the parameter update.
    auto& memory = model_.memory();
    if (memory.enabled()) {
        std::vector<float> q(outs.front().write_query.size(), 0.0f);
        for (const auto& o : outs)
            for (std::size_t i = 0; i < q.size(); ++i) q[i] += o.write_query[i] * inv;
        const std::size_t width = q.size();
        memory.write(Tensor::from({1, width}, std::move(q)));
    }

    ++step_;
    m.step = step_;
    m.alignment = alignment;
    m.eq = model_.quantization_effectiveness();
    m.mem_entropy = distribution_entropy(memory.usage());
    m.lr = lr;
    m.triggered = decision.triggered;
    m.active = controller_.state().active;
    return m;
}

StepMetrics Trainer::step_on(const Dataset& dataset) {
    attach_dataset(dataset.size());
    std::vector<Batch> micro;
    for (std::size_t i = 0; i < config_.optim.grad_accum; ++i) {
        micro.push_back(assemble_batch(dataset, config_.optim.batch_size, config_.train.mix_ratio, sampler_,
                                       model_.config().end_token()));
    }
    return train_step(micro);
}

void write_heatmap(const std::filesystem::path& path, const std::vector<std::vector<float>>& columns) {
    const std::size_t k = columns.empty() ? 0 : columns.front().size();
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << "# slots=" << k << " columns=" << columns.size() << "\n";
        char buf[32];
        for (std::size_t s = 0; s < k; ++s) {
            for (std::size_t c = 0; c < columns.size(); ++c) {
                std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(columns[c].at(s)));
                if (c) out << ' ';
                out << buf;
            }
            out << "\n";
        }
    }
    std::filesystem::rename(tmp, path);
}

std::vector<std::vector<float>> read_heatmap(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open heatmap " + path.string());
    std::string header;
    std::getline(in, header);
    std::size_t k = 0, n = 0;
    if (std::sscanf(header.c_str(), "# slots=%zu columns=%zu", &k, &n) != 2) {
        throw std::runtime_error("malformed heatmap header in " + path.string());
    }
    std::vector<std::vector<float>> columns(n, std::vector<float>(k));
    for (std::size_t s = 0; s < k; ++s)
        for (std::size_t c = 0; c < n; ++c)
            if (!(in >> columns[c][s])) throw std::runtime_error("truncated heatmap " + path.string());
    return columns;
}

void train_loop(Trainer& trainer, const Dataset& dataset, const LoopOptions& options) {
    const auto& cfg = trainer.config();
    std::filesystem::create_directories(options.out_dir);
    const auto log_path = options.out_dir / "metrics.log";
    const auto heat_path = options.out_dir / "heatmap.txt";
    const auto ckpt_path = options.out_dir / "checkpoint.bmck";
    const Dataset& eval = options.eval_set ? *options.eval_set : dataset;

    std::vector<std::vector<float>> heat;
    if (trainer.step() > 0 && std::filesystem::exists(heat_path)) heat = read_heatmap(heat_path);
    std::ofstream log(log_path, trainer.step() > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + log_path.string());

    auto& model = trainer.model();
    while (trainer.step() < options.steps) {
        const auto m = trainer.step_on(dataset);
        if (m.step % cfg.train.log_interval == 0) {
            const auto line = format_metrics(m);
            log << line << "\n";
            log.flush();
            if (options.echo) *options.echo << line << std::endl;
            model.set_training(false);
            heat.push_back(model.slot_activation(eval));
            write_heatmap(heat_path, heat);
        }
        if (cfg.train.checkpoint_interval > 0 && m.step % cfg.train.checkpoint_interval == 0) {
            save_checkpoint(ckpt_path, model, cfg, &trainer);
        }
    }
    save_checkpoint(ckpt_path, model, cfg, &trainer);
}

}  // namespace bitmar
