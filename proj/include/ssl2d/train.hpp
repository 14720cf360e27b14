#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssl2d/autodiff.hpp"
#include "ssl2d/dataset.hpp"
#include "ssl2d/eval.hpp"
#include "ssl2d/model.hpp"
#include "ssl2d/rng.hpp"

// Training procedures: supervised localization, gradient-reversal adversarial
// training, label-flipping training, and the ensemble of discriminators.
//
// Domain class labels: 1 = synthetic/source, 0 = real/target. Update order is
// fixed for determinism: label flipping runs (3a) then (3b) on the same batch
// pair; ensembles handle the intermediate discriminator before the output one.

namespace ssl2d::train {

enum class Method { S, GRint, LFint, GRout, LFout, GRintGRout, LFintLFout };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::S: return "S";
        case Method::GRint: return "GRint";
        case Method::LFint: return "LFint";
        case Method::GRout: return "GRout";
        case Method::LFout: return "LFout";
        case Method::GRintGRout: return "GRintGRout";
        case Method::LFintLFout: return "LFintLFout";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    for (Method m : {Method::S, Method::GRint, Method::LFint, Method::GRout, Method::LFout,
                     Method::GRintGRout, Method::LFintLFout})
        if (s == to_string(m)) return m;
    throw std::invalid_argument("unknown method: " + s);
}

inline bool uses_int(Method m) {
    return m == Method::GRint || m == Method::LFint || m == Method::GRintGRout ||
           m == Method::LFintLFout;
}
inline bool uses_out(Method m) {
    return m == Method::GRout || m == Method::LFout || m == Method::GRintGRout ||
           m == Method::LFintLFout;
}
inline bool is_grl(Method m) {
    return m == Method::GRint || m == Method::GRout || m == Method::GRintGRout;
}

struct TrainConfig {
    int epochs = 200;       // paper
    int batch_size = 256;   // paper
    double lr = 1e-4;       // paper
    double beta1 = 0.5;     // paper
    double beta2 = 0.999;   // paper
    double eps = 1e-8;
    double lambda_grl = 1.0;
    double w_int = 1.0;
    double w_out = 1.0;
    std::uint64_t seed = 1;

    ad::AdamConfig adam() const { return {lr, beta1, beta2, eps}; }
};

/// Source batch carries labels; the target batch never does (unsupervised
/// adaptation by construction).
struct DomainBatch {
    model::Batch source;
    model::Batch target;

    DomainBatch(model::Batch s, model::Batch t) : source(std::move(s)), target(std::move(t)) {
        if (!source.labeled()) throw std::invalid_argument("DomainBatch: source must be labeled");
        if (target.labeled())
            throw std::invalid_argument("DomainBatch: target labels must be absent");
    }
};

struct StepLosses {
    double task = 0.0;
    std::optional<double> d_int, d_out;
};

namespace detail {

inline ad::Var const_labels(ad::Tape& t, int n, double v) {
    std::vector<double> data(static_cast<std::size_t>(n), v);
    return t.constant(ad::Shape{n, 1}, data);
}

/// Eq. 3a / Eq. 2 discriminator loss on a scored batch pair:
/// L_d(D(.), source_label) + L_d(D(.), 1 - source_label).
inline ad::Var domain_loss(ad::Tape& t, ad::Var probs, int n_source, int n_target,
                           double source_label) {
    ad::Var p_s = ad::slice_batch(probs, 0, n_source);
    ad::Var p_r = ad::slice_batch(probs, n_source, n_target);
    return ad::add(ad::bce_loss(p_s, const_labels(t, n_source, source_label)),
                   ad::bce_loss(p_r, const_labels(t, n_target, 1.0 - source_label)));
}

inline ad::Var attachment(const model::ForwardResult& r, model::Placement p) {
    return p == model::Placement::Intermediate ? r.merged_encoding : r.heatmap;
}

}  // namespace detail

/// One Adam update of the localization parameters on Eq. 1 (MSE against the
/// label heatmaps). Returns the batch loss.
inline double supervised_step(model::LocalizationModel& m, const model::Batch& batch,
                              const ad::AdamConfig& adam) {
    if (!batch.labeled()) throw std::invalid_argument("supervised_step: unlabeled batch");
    ad::Tape t;
    auto out = m.forward(t, batch);
    ad::Var target = t.constant(out.heatmap.shape(), batch.labels);
    ad::Var loss = ad::mse_loss(out.heatmap, target);
    m.store().zero_grads();
    t.backward(loss);
    m.store().adam_step(adam);
    return loss.scalar();
}

/// Eq. 3a: one Adam update of the discriminator(s) with domain labels
/// (source=1, target=0) on detached model outputs; the localization model is
/// untouched bit-exactly. One discriminator pass per discriminator.
inline StepLosses discriminator_step(std::vector<model::Discriminator*> discs,
                                     model::LocalizationModel& m, const DomainBatch& batch,
                                     const ad::AdamConfig& adam) {
    bool need_heat = false;
    for (auto* d : discs)
        if (d->placement() == model::Placement::Output) need_heat = true;

    ad::Tape t;
    auto out_s = m.forward(t, batch.source, need_heat || m.variant() != model::Variant::Adaptation);
    auto out_r = m.forward(t, batch.target, need_heat || m.variant() != model::Variant::Adaptation);

    StepLosses losses;
    std::vector<ad::Var> per_disc;
    for (auto* d : discs) {
        ad::Var att_s = ad::detach(detail::attachment(out_s, d->placement()));
        ad::Var att_r = ad::detach(detail::attachment(out_r, d->placement()));
        ad::Var probs = d->forward(t, ad::concat_batch({att_s, att_r}));
        ad::Var loss = detail::domain_loss(t, probs, batch.source.n, batch.target.n, 1.0);
        per_disc.push_back(loss);
        if (d->placement() == model::Placement::Intermediate) losses.d_int = loss.scalar();
        else losses.d_out = loss.scalar();
    }
    ad::Var total = per_disc[0];
    for (std::size_t i = 1; i < per_disc.size(); ++i) total = ad::add(total, per_disc[i]);

    for (auto* d : discs) d->store().zero_grads();
    t.backward(total);
    for (auto* d : discs) d->store().adam_step(adam);
    return losses;
}

/// Eq. 3b: one Adam update of the localization parameters minimizing the task
/// loss plus the flipped-label domain loss (source=0, target=1) through the
/// frozen discriminator(s). Second discriminator pass of a label-flip step.
inline StepLosses generator_adversarial_step_labelflip(model::LocalizationModel& m,
                                                       std::vector<model::Discriminator*> discs,
                                                       const DomainBatch& batch,
                                                       const ad::AdamConfig& adam, double w_int,
                                                       double w_out) {
    bool need_heat_target = false;
    for (auto* d : discs)
        if (d->placement() == model::Placement::Output) need_heat_target = true;

    ad::Tape t;
    auto out_s = m.forward(t, batch.source);
    auto out_r = m.forward(t, batch.target,
                           need_heat_target || m.variant() != model::Variant::Adaptation);

    ad::Var target = t.constant(out_s.heatmap.shape(), batch.source.labels);
    ad::Var task = ad::mse_loss(out_s.heatmap, target);
    StepLosses losses;
    losses.task = task.scalar();

    ad::Var total = task;
    for (auto* d : discs) {
        ad::Var att_s = detail::attachment(out_s, d->placement());
        ad::Var att_r = detail::attachment(out_r, d->placement());
        ad::Var probs = d->forward(t, ad::concat_batch({att_s, att_r}));
        ad::Var adv = detail::domain_loss(t, probs, batch.source.n, batch.target.n, 0.0);
        const double w = d->placement() == model::Placement::Intermediate ? w_int : w_out;
        if (d->placement() == model::Placement::Intermediate) losses.d_int = adv.scalar();
        else losses.d_out = adv.scalar();
        total = ad::add(total, ad::scale(adv, w));
    }

    m.store().zero_grads();
    for (auto* d : discs) d->store().zero_grads();
    t.backward(total);
    m.store().adam_step(adam);
    for (auto* d : discs) d->store().zero_grads();  // theta_d unchanged
    return losses;
}

/// Eq. 2 via the GRL: a single forward/backward in which the discriminators
/// descend the domain loss (true labels) while the localization parameters
/// ascend it through the reversal, together with the task term. Exactly one
/// discriminator pass per discriminator per step.
inline StepLosses grl_joint_step(model::LocalizationModel& m,
                                 std::vector<model::Discriminator*> discs,
                                 const DomainBatch& batch, const ad::AdamConfig& adam,
                                 double lambda, double w_int, double w_out) {
    bool need_heat_target = false;
    for (auto* d : discs)
        if (d->placement() == model::Placement::Output) need_heat_target = true;

    ad::Tape t;
    auto out_s = m.forward(t, batch.source);
    auto out_r = m.forward(t, batch.target,
                           need_heat_target || m.variant() != model::Variant::Adaptation);

    ad::Var target = t.constant(out_s.heatmap.shape(), batch.source.labels);
    ad::Var task = ad::mse_loss(out_s.heatmap, target);
    StepLosses losses;
    losses.task = task.scalar();

    ad::Var total = task;
    for (auto* d : discs) {
        ad::Var att = ad::concat_batch({detail::attachment(out_s, d->placement()),
                                        detail::attachment(out_r, d->placement())});
        ad::Var probs = d->forward(t, ad::grad_reverse(att, lambda));
        ad::Var dl = detail::domain_loss(t, probs, batch.source.n, batch.target.n, 1.0);
        const double w = d->placement() == model::Placement::Intermediate ? w_int : w_out;
        if (d->placement() == model::Placement::Intermediate) losses.d_int = dl.scalar();
        else losses.d_out = dl.scalar();
        total = ad::add(total, ad::scale(dl, w));
    }

    m.store().zero_grads();
    for (auto* d : discs) d->store().zero_grads();
    t.backward(total);
    m.store().adam_step(adam);
    for (auto* d : discs) d->store().adam_step(adam);
    return losses;
}

/// Verification probe for the Eq. 3b <-> Eq. 2 coincidence at D = 0.5: the
/// discriminator output is pinned to exactly 0.5 per sample (logits minus
/// their detached copy) while keeping the true Jacobian, and the localization
/// gradients of the label-flip and GRL domain terms are compared. Returns the
/// maximum relative difference over all localization parameters.
inline double labelflip_grl_coincidence_probe(model::LocalizationModel& m,
                                              model::Discriminator& d, const DomainBatch& batch,
                                              double lambda) {
    auto domain_grads = [&](bool use_grl) {
        ad::Tape t;
        auto out_s = m.forward(t, batch.source);
        auto out_r = m.forward(t, batch.target,
                               d.placement() == model::Placement::Output ||
                                   m.variant() != model::Variant::Adaptation);
        ad::Var att = ad::concat_batch({detail::attachment(out_s, d.placement()),
                                        detail::attachment(out_r, d.placement())});
        if (use_grl) att = ad::grad_reverse(att, lambda);
        ad::Var logits = d.forward_logits(t, att);
        ad::Var pinned = ad::sigmoid(ad::add(logits, ad::scale(ad::detach(logits), -1.0)));
        ad::Var loss = detail::domain_loss(t, pinned, batch.source.n, batch.target.n,
                                           use_grl ? 1.0 : 0.0);
        m.store().zero_grads();
        d.store().zero_grads();
        t.backward(loss);
        std::vector<std::vector<double>> grads;
        for (const auto& p : m.store().params()) grads.push_back(p->grad);
        return grads;
    };

    const auto g_lf = domain_grads(false);
    const auto g_grl = domain_grads(true);
    double max_rel = 0.0;
    for (std::size_t i = 0; i < g_lf.size(); ++i)
        for (std::size_t j = 0; j < g_lf[i].size(); ++j) {
            const double a = g_lf[i][j], b = g_grl[i][j];
            const double denom = std::max({std::abs(a), std::abs(b), 1e-12});
            max_rel = std::max(max_rel, std::abs(a - b) / denom);
        }
    return max_rel;
}

struct EpochRecord {
    int epoch = 0;
    double loss_m = 0.0;
    std::optional<double> loss_d_int, loss_d_out;
    std::optional<eval::Metrics> val;
};

inline nlohmann::json to_json(const EpochRecord& r) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["loss_m"] = r.loss_m;
    j["loss_d_int"] = r.loss_d_int ? nlohmann::json(*r.loss_d_int) : nlohmann::json(nullptr);
    j["loss_d_out"] = r.loss_d_out ? nlohmann::json(*r.loss_d_out) : nlohmann::json(nullptr);
    if (r.val) {
        j["val_precision"] = r.val->precision;
        j["val_recall"] = r.val->recall;
        j["val_f1"] = r.val->f1;
        j["val_rmse"] = r.val->rmse ? nlohmann::json(*r.val->rmse) : nlohmann::json(nullptr);
    } else {
        j["val_precision"] = nullptr;
        j["val_recall"] = nullptr;
        j["val_f1"] = nullptr;
        j["val_rmse"] = nullptr;
    }
    return j;
}

/// One training run: a variant + method pair with deterministic state.
/// Layout-generalization training is Method::S over a layout variant;
/// adaptation methods run on Variant::Adaptation.
class Trainer {
  public:
    Trainer(model::Variant variant, Method method, const model::ModelConfig& base_cfg,
            const TrainConfig& cfg)
        : method_(method), cfg_(cfg) {
        model::ModelConfig mc = base_cfg;
        mc.init_seed = rng::derive_seed(cfg.seed, rng::hash_str("model"));
        model_ = std::make_unique<model::LocalizationModel>(variant, mc);
        if (method != Method::S && variant != model::Variant::Adaptation)
            throw std::invalid_argument("adversarial methods require the adaptation variant");
        if (uses_int(method))
            dint_ = std::make_unique<model::Discriminator>(
                model::Placement::Intermediate, mc, rng::derive_seed(cfg.seed, rng::hash_str("dint")));
        if (uses_out(method))
            dout_ = std::make_unique<model::Discriminator>(
                model::Placement::Output, mc, rng::derive_seed(cfg.seed, rng::hash_str("dout")));
    }

    /// target may be null for Method::S. Target labels are never read.
    EpochRecord run_epoch(const acoustics::Dataset& source, const acoustics::Dataset* target,
                          const eval::Protocol* val_proto, const acoustics::Dataset* val) {
        const int epoch = epochs_done_;
        if (method_ != Method::S && (target == nullptr || target->samples.empty()))
            throw std::invalid_argument("adaptation method without target dataset");

        std::vector<int> src_idx(source.samples.size());
        std::iota(src_idx.begin(), src_idx.end(), 0);
        rng::Rng shuffle_s(rng::derive_seed(cfg_.seed, rng::hash_str("shuffle-source"), epoch));
        shuffle_s.shuffle(src_idx);

        std::vector<int> tgt_idx;
        if (target) {
            tgt_idx.resize(target->samples.size());
            std::iota(tgt_idx.begin(), tgt_idx.end(), 0);
            rng::Rng shuffle_t(rng::derive_seed(cfg_.seed, rng::hash_str("shuffle-target"), epoch));
            shuffle_t.shuffle(tgt_idx);
        }

        const auto adam = cfg_.adam();
        double task_acc = 0.0, dint_acc = 0.0, dout_acc = 0.0;
        int batches = 0;
        std::size_t tgt_pos = 0;

        for (std::size_t start = 0; start < src_idx.size(); start += cfg_.batch_size) {
            const std::size_t stop = std::min(src_idx.size(), start + cfg_.batch_size);
            std::vector<int> sb(src_idx.begin() + start, src_idx.begin() + stop);
            auto source_batch = eval::make_batch(source, sb, true);

            if (method_ == Method::S) {
                task_acc += supervised_step(*model_, source_batch, adam);
            } else {
                std::vector<int> tb;
                for (std::size_t i = 0; i < sb.size(); ++i) {
                    tb.push_back(tgt_idx[tgt_pos]);
                    tgt_pos = (tgt_pos + 1) % tgt_idx.size();
                }
                DomainBatch db(std::move(source_batch), eval::make_batch(*target, tb, false));
                StepLosses losses;
                if (is_grl(method_)) {
                    losses = grl_joint_step(*model_, discriminators(), db, adam, cfg_.lambda_grl,
                                            cfg_.w_int, cfg_.w_out);
                } else {
                    const auto d_losses = discriminator_step(discriminators(), *model_, db, adam);
                    losses = generator_adversarial_step_labelflip(*model_, discriminators(), db,
                                                                  adam, cfg_.w_int, cfg_.w_out);
                    losses.d_int = d_losses.d_int;
                    losses.d_out = d_losses.d_out;
                }
                task_acc += losses.task;
                if (losses.d_int) dint_acc += *losses.d_int;
                if (losses.d_out) dout_acc += *losses.d_out;
            }
            ++batches;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss_m = task_acc / batches;
        if (dint_) rec.loss_d_int = dint_acc / batches;
        if (dout_) rec.loss_d_out = dout_acc / batches;
        if (val && val_proto) rec.val = eval::evaluate_dataset(*model_, *val, *val_proto);
        history_.push_back(rec);
        ++epochs_done_;
        return rec;
    }

    model::LocalizationModel& localization() { return *model_; }
    model::Discriminator* d_int() { return dint_.get(); }
    model::Discriminator* d_out() { return dout_.get(); }
    Method method() const { return method_; }
    int epochs_done() const { return epochs_done_; }
    const std::vector<EpochRecord>& history() const { return history_; }

    std::vector<model::Discriminator*> discriminators() {
        std::vector<model::Discriminator*> ds;
        if (dint_) ds.push_back(dint_.get());
        if (dout_) ds.push_back(dout_.get());
        return ds;
    }

    /// Full training state (parameters + Adam moments + epoch), resumable.
    void save_checkpoint(const std::string& path) const {
        std::vector<ad::CheckpointEntry> entries;
        ad::store_to_entries(model_->store(), "model/", true, entries);
        if (dint_) ad::store_to_entries(dint_->store(), "dint/", true, entries);
        if (dout_) ad::store_to_entries(dout_->store(), "dout/", true, entries);
        entries.push_back({"trainer/epoch", ad::Shape{1}, {static_cast<double>(epochs_done_)}});
        ad::write_checkpoint(path, model::to_string(model_->variant()), entries);
    }

    void load_checkpoint(const std::string& path) {
        const auto [kind, entries] = ad::read_checkpoint(path);
        if (kind != model::to_string(model_->variant()))
            throw std::runtime_error("checkpoint variant mismatch: " + kind);
        ad::entries_to_store(entries, "model/", model_->store());
        if (dint_) ad::entries_to_store(entries, "dint/", dint_->store());
        if (dout_) ad::entries_to_store(entries, "dout/", dout_->store());
        for (const auto& e : entries)
            if (e.name == "trainer/epoch") epochs_done_ = static_cast<int>(e.data[0]);
    }

    std::uint64_t checksum() const {
        rng::Fnv64 f;
        f.update_value(model_->store().checksum());
        if (dint_) f.update_value(dint_->store().checksum());
        if (dout_) f.update_value(dout_->store().checksum());
        return f.h;
    }

  private:
    Method method_;
    TrainConfig cfg_;
    std::unique_ptr<model::LocalizationModel> model_;
    std::unique_ptr<model::Discriminator> dint_, dout_;
    std::vector<EpochRecord> history_;
    int epochs_done_ = 0;
};

struct TrainResult {
    std::unique_ptr<Trainer> trainer;
    std::vector<EpochRecord> history;
};

/// Unsupervised adaptation: labeled source, unlabeled target. Validation (if
/// given) must be a labeled set whose labels the caller may use — the target
/// set's labels are never read.
inline TrainResult train_adaptation(Method method, const acoustics::Dataset& source,
                                    const acoustics::Dataset& target,
                                    const model::ModelConfig& mc, const TrainConfig& cfg,
                                    const acoustics::Dataset* val = nullptr,
                                    const eval::Protocol* val_proto = nullptr) {
    auto tr = std::make_unique<Trainer>(model::Variant::Adaptation, method, mc, cfg);
    for (int e = 0; e < cfg.epochs; ++e) tr->run_epoch(source, &target, val_proto, val);
    auto hist = tr->history();
    return {std::move(tr), std::move(hist)};
}

/// Supervised layout-generalization training; every sample carries its own
/// array poses, consumed by the variant's pose path.
inline TrainResult train_layout(model::Variant variant, const acoustics::Dataset& data,
                                const model::ModelConfig& mc, const TrainConfig& cfg,
                                const acoustics::Dataset* val = nullptr,
                                const eval::Protocol* val_proto = nullptr) {
    auto tr = std::make_unique<Trainer>(variant, Method::S, mc, cfg);
    for (int e = 0; e < cfg.epochs; ++e) tr->run_epoch(data, nullptr, val_proto, val);
    auto hist = tr->history();
    return {std::move(tr), std::move(hist)};
}

inline void write_history(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    for (const auto& r : history) os << to_json(r).dump() << "\n";
}

}  // namespace ssl2d::train
