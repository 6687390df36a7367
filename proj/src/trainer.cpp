#include "emorl/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "emorl/errors.hpp"

namespace emorl {

namespace {

constexpr int64_t kCheckpointFormat = 1;

double mean_of(const torch::Tensor& t) { return t.mean().item<double>(); }

torch::Tensor hash_tensor(uint64_t h) { return torch::tensor({std::bit_cast<int64_t>(h)}, torch::kLong); }

uint64_t read_hash(torch::serialize::InputArchive& archive) {
    torch::Tensor t;
    archive.read("config_hash", t);
    return std::bit_cast<uint64_t>(t.item<int64_t>());
}

}  // namespace

double lr_at(int64_t step, const LrSchedule& s) {
    if (step < 0) throw ConfigError("negative step");
    if (s.warmup > 0 && step < s.warmup) return s.base * static_cast<double>(step) / static_cast<double>(s.warmup);
    return s.base * std::pow(0.5, static_cast<double>(step - s.warmup) / s.half_life);
}

int current_I(int64_t step, const std::vector<CurriculumEntry>& curriculum) {
    if (curriculum.empty()) throw ConfigError("empty curriculum");
    int steps = curriculum.front().refinement_steps;
    for (const auto& e : curriculum)
        if (e.step <= step) steps = e.refinement_steps;
    return steps;
}

void TrainConfig::validate() const {
    model.validate();
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
    if (lr.base <= 0.0 || lr.warmup < 0 || lr.half_life <= 0.0) throw ConfigError("invalid learning-rate schedule");
    if (grad_clip <= 0.0) throw ConfigError("grad_clip must be positive");
    if (curriculum.empty()) throw ConfigError("curriculum must not be empty");
    for (std::size_t i = 0; i < curriculum.size(); ++i) {
        if (curriculum[i].refinement_steps < 0) throw ConfigError("curriculum I must be >= 0");
        if (i == 0) continue;
        if (curriculum[i].step <= curriculum[i - 1].step)
            throw ConfigError("curriculum steps must be strictly increasing");
        if (curriculum[i].refinement_steps > curriculum[i - 1].refinement_steps)
            throw ConfigError("curriculum I must not increase");
    }
}

TrainConfig tetromino_train_preset() {
    TrainConfig c;
    c.model.height = c.model.width = 32;
    c.model.slots = 4;
    c.model.latent_dim = 32;
    c.model.layers = 3;
    c.model.decoder = DecoderKind::Light;
    c.model.decoder_channels = 32;
    c.model.likelihood = Likelihood::Gaussian;
    c.model.sigma_lik = 0.3;
    c.model.prior = PriorVariant::ReversedPlusPlus;
    c.total_steps = 30000;
    // Full-scale 10K warm-up / 100K half-life shrunk by the step budget ratio.
    c.lr.warmup = 1000;
    c.lr.half_life = 10000.0;
    c.curriculum = {{0, 3}};
    c.geco = true;
    return c;
}

TrainConfig sprites_train_preset() {
    TrainConfig c;
    c.model.height = c.model.width = 48;
    c.model.slots = 5;
    c.model.latent_dim = 64;
    c.model.layers = 3;
    c.model.decoder = DecoderKind::Light;
    c.model.decoder_channels = 32;
    c.model.likelihood = Likelihood::Gaussian;
    c.model.sigma_lik = 0.1;
    c.model.prior = PriorVariant::ReversedPlusPlus;
    c.total_steps = 50000;
    c.lr.warmup = 1667;
    c.lr.half_life = 16667.0;
    c.curriculum = {{0, 3}, {15000, 1}};
    c.geco = false;
    return c;
}

std::string canonical_string(const TrainConfig& c) {
    std::ostringstream s;
    s.precision(17);
    const auto& m = c.model;
    s << "height=" << m.height << ";width=" << m.width << ";slots=" << m.slots << ";latent_dim=" << m.latent_dim
      << ";layers=" << m.layers << ";encoder_channels=" << m.encoder_channels << ";decoder=" << to_string(m.decoder)
      << ";decoder_channels=" << m.decoder_channels << ";likelihood=" << to_string(m.likelihood)
      << ";sigma_lik=" << m.sigma_lik << ";prior=" << to_string(m.prior) << ";attention_eps=" << m.attention_eps
      << ";prior_hidden=" << m.prior_hidden << ";refine_hidden=" << m.refine_hidden << ";batch_size=" << c.batch_size
      << ";lr_base=" << c.lr.base << ";lr_warmup=" << c.lr.warmup << ";lr_half_life=" << c.lr.half_life
      << ";grad_clip=" << c.grad_clip << ";curriculum=";
    for (const auto& e : c.curriculum) s << e.step << ":" << e.refinement_steps << ",";
    s << ";geco=" << c.geco << ";geco_nats_per_value=" << c.geco_nats_per_value << ";seed=" << c.seed;
    // total_steps is deliberately left out: extending a run must not invalidate its checkpoints.
    return s.str();
}

uint64_t fnv1a(const std::string& text) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

std::string LossBreakdown::json() const {
    nlohmann::json j;
    j["step"] = step;
    j["I"] = refinement_steps;
    j["nll"] = nll;
    j["kl"] = kl;
    j["refinement_nll"] = refinement_nll;
    j["refinement_kl"] = refinement_kl;
    j["update_norms"] = update_norms;
    j["total"] = total;
    j["elbo"] = elbo;
    j["zeta"] = zeta;
    j["lr"] = lr;
    j["grad_norm"] = grad_norm;
    return j.dump();
}

double clip_gradients(const std::vector<torch::Tensor>& parameters, double max_norm) {
    return torch::nn::utils::clip_grad_norm_(parameters, max_norm);
}

torch::Tensor images_to_tensor(const std::vector<Scene>& scenes) {
    if (scenes.empty()) throw IndexError("empty batch");
    const auto h = static_cast<int64_t>(scenes.front().height);
    const auto w = static_cast<int64_t>(scenes.front().width);
    auto out = torch::empty({static_cast<int64_t>(scenes.size()), h, w, 3}, torch::kUInt8);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const auto& s = scenes[i];
        if (static_cast<int64_t>(s.height) != h || static_cast<int64_t>(s.width) != w)
            throw ShapeError("scenes in a batch differ in size");
        std::memcpy(out[static_cast<int64_t>(i)].data_ptr<uint8_t>(), s.image.data(), s.image.size());
    }
    return out.permute({0, 3, 1, 2}).to(torch::kFloat32).div_(255.0).contiguous();
}

std::vector<std::size_t> batch_indices(uint64_t seed, int64_t step, int64_t batch_size, std::size_t dataset_size) {
    if (dataset_size == 0) throw IndexError("cannot draw batches from an empty dataset");
    std::vector<std::size_t> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    const auto n = static_cast<int64_t>(dataset_size);
    int64_t cached_epoch = -1;
    std::vector<std::size_t> order(dataset_size);
    for (int64_t j = 0; j < batch_size; ++j) {
        const int64_t flat = step * batch_size + j;
        const int64_t epoch = flat / n;
        if (epoch != cached_epoch) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::mt19937_64 rng(scene_seed(seed ^ 0x5bd1e995ull, static_cast<uint64_t>(epoch)));
            // Fisher-Yates with an explicit draw keeps the order portable across standard libraries.
            for (std::size_t i = dataset_size - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
            cached_epoch = epoch;
        }
        out.push_back(order[static_cast<std::size_t>(flat % n)]);
    }
    return out;
}

uint64_t step_seed(uint64_t seed, int64_t step) { return scene_seed(seed ^ 0x9e3779b97f4a7c15ull, static_cast<uint64_t>(step)); }

Trainer::Trainer(TrainConfig config) : config_(std::move(config)) {
    config_.validate();
    hash_ = config_hash(config_);
    torch::manual_seed(config_.seed);
    model_ = EfficientMorl(config_.model);
    optimizer_ = std::make_unique<torch::optim::Adam>(
        model_->parameters(), torch::optim::AdamOptions(config_.lr.base).betas({0.9, 0.999}).eps(1e-8));
    geco_.nll_threshold = config_.geco_threshold_value();
}

LossBreakdown Trainer::train_step(const DatasetView& data) {
    std::vector<Scene> scenes;
    for (auto i : batch_indices(config_.seed, step_, config_.batch_size, data.size())) scenes.push_back(data.at(i));
    return train_step(images_to_tensor(scenes));
}

LossBreakdown Trainer::train_step(const torch::Tensor& images) {
    model_->train();
    const int steps = current_I(step_, config_.curriculum);
    const double lr = lr_at(step_, config_.lr);
    for (auto& group : optimizer_->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

    auto gen = at::make_generator<at::CPUGeneratorImpl>(step_seed(config_.seed, step_));
    const auto noise = draw_noise(config_.model, images.size(0), steps, gen);

    optimizer_->zero_grad();
    const auto r = model_->forward(images, noise, ForwardMode::Train);

    auto constrained = [&](const torch::Tensor& nll, const torch::Tensor& kl) {
        return config_.geco ? geco_apply(kl, nll, geco_) : nll + kl;
    };
    std::vector<torch::Tensor> refinement;
    for (std::size_t i = 1; i < r.trace.losses.size(); ++i)
        refinement.push_back(constrained(r.trace.losses[i].nll, r.trace.losses[i].kl));
    const auto loss = discounted_total(constrained(r.stage1.nll, r.stage1.kl_total()), refinement).mean();

    LossBreakdown b;
    b.step = step_;
    b.refinement_steps = steps;
    b.lr = lr;
    b.nll = mean_of(r.stage1.nll);
    for (const auto& k : r.stage1.kl) b.kl.push_back(mean_of(k));
    for (std::size_t i = 1; i < r.trace.losses.size(); ++i) {
        b.refinement_nll.push_back(mean_of(r.trace.losses[i].nll));
        b.refinement_kl.push_back(mean_of(r.trace.losses[i].kl));
    }
    b.update_norms = r.trace.update_norms;
    b.total = loss.item<double>();
    b.elbo = -mean_of(r.stage1.total());
    if (!std::isfinite(b.total)) throw NumericError("non-finite training loss: " + b.json());

    loss.backward();
    b.grad_norm = clip_gradients(model_->parameters(), config_.grad_clip);
    optimizer_->step();
    if (config_.geco) geco_ = geco_update(geco_, b.nll);
    b.zeta = geco_.zeta;
    ++step_;
    return b;
}

void Trainer::save(const std::filesystem::path& path) {
    torch::serialize::OutputArchive archive;
    archive.write("format", torch::tensor({kCheckpointFormat}, torch::kLong));
    archive.write("config_hash", hash_tensor(hash_));
    archive.write("step", torch::tensor({step_}, torch::kLong));
    archive.write("geco", torch::tensor({geco_.zeta, geco_.c_ema, geco_.nll_threshold}, torch::kFloat64));
    torch::serialize::OutputArchive model_archive, optimizer_archive;
    model_->save(model_archive);
    optimizer_->save(optimizer_archive);
    archive.write("model", model_archive);
    archive.write("optimizer", optimizer_archive);
    try {
        archive.save_to(path.string());
    } catch (const c10::Error& e) {
        throw IoError("cannot write checkpoint " + path.string());
    }
}

void Trainer::load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        throw FormatError("unreadable checkpoint " + path.string());
    }
    if (read_hash(archive) != hash_) throw MismatchError("checkpoint was written under a different configuration");
    torch::Tensor step, geco;
    archive.read("step", step);
    archive.read("geco", geco);
    torch::serialize::InputArchive model_archive, optimizer_archive;
    archive.read("model", model_archive);
    archive.read("optimizer", optimizer_archive);
    model_->load(model_archive);
    optimizer_->load(optimizer_archive);
    step_ = step.item<int64_t>();
    geco_.zeta = geco[0].item<double>();
    geco_.c_ema = geco[1].item<double>();
    geco_.nll_threshold = geco[2].item<double>();
}

void save_model(EfficientMorl& model, uint64_t hash, const std::filesystem::path& path) {
    torch::serialize::OutputArchive archive, model_archive;
    archive.write("format", torch::tensor({kCheckpointFormat}, torch::kLong));
    archive.write("config_hash", hash_tensor(hash));
    model->save(model_archive);
    archive.write("model", model_archive);
    archive.save_to(path.string());
}

void load_model(EfficientMorl& model, uint64_t hash, const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        throw FormatError("unreadable checkpoint " + path.string());
    }
    if (read_hash(archive) != hash) throw MismatchError("checkpoint was written under a different configuration");
    torch::serialize::InputArchive model_archive;
    archive.read("model", model_archive);
    model->load(model_archive);
}

}  // namespace emorl
