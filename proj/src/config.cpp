#include "otpr/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "otpr/error.hpp"

namespace otpr::config {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) +
                    "' as " + expected);
}

long long parse_integer(std::string_view key, std::string_view v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  // from_chars for double is missing in older libstdc++ releases.
  const std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(out))
    bad_value(key, v, "a finite number");
  return out;
}

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
T checked_cast(std::string_view key, std::string_view v, long long x) {
  if (x < static_cast<long long>(std::numeric_limits<T>::min()) ||
      static_cast<unsigned long long>(x) > static_cast<unsigned long long>(std::numeric_limits<T>::max()))
    bad_value(key, v, "an in-range integer");
  return static_cast<T>(x);
}

void require_one_of(std::string_view key, const std::string& v,
                    std::initializer_list<const char*> options) {
  for (const char* o : options)
    if (v == o) return;
  std::string list;
  for (const char* o : options) list += std::string(list.empty() ? "" : ", ") + o;
  throw ConfigError("config key '" + std::string(key) + "' must be one of " + list + " (got '" + v + "')");
}

}  // namespace

std::vector<Field> fields(RunConfig& c) {
  return {
      {"seed", &c.seed},
      {"out_dir", &c.out_dir},
      {"env.name", &c.env_name},
      {"env.reward", &c.env_reward},
      {"env.horizon", &c.env_horizon},
      {"demos.count", &c.demos_count},
      {"demos.path", &c.demos_path},
      {"demos.generate", &c.demos_generate},
      {"model.hidden", &c.model_hidden},
      {"model.schedule", &c.model_schedule},
      {"model.beta_min", &c.model_beta_min},
      {"model.beta_max", &c.model_beta_max},
      {"model.sigma_min", &c.model_sigma_min},
      {"model.sigma_max", &c.model_sigma_max},
      {"model.sampler", &c.model_sampler},
      {"model.sampler_steps", &c.model_sampler_steps},
      {"pretrain.epochs", &c.pretrain_epochs},
      {"pretrain.batch", &c.pretrain_batch},
      {"pretrain.lr", &c.pretrain_lr},
      {"pretrain.eval_episodes", &c.pretrain_eval_episodes},
      {"finetune.checkpoint", &c.finetune_checkpoint},
      {"finetune.outer_iters", &c.finetune_outer_iters},
      {"finetune.episodes_per_iter", &c.finetune_episodes_per_iter},
      {"finetune.dual_iters", &c.finetune_dual_iters},
      {"finetune.critic_updates", &c.finetune_critic_updates},
      {"finetune.score_updates", &c.finetune_score_updates},
      {"finetune.proposals", &c.finetune_proposals},
      {"finetune.guidance", &c.finetune_guidance},
      {"finetune.score_loss", &c.finetune_score_loss},
      {"finetune.masked", &c.finetune_masked},
      {"finetune.actor_batch", &c.finetune_actor_batch},
      {"finetune.actor_lr", &c.finetune_actor_lr},
      {"finetune.softmax_temperature", &c.finetune_softmax_temperature},
      {"finetune.eval_episodes", &c.finetune_eval_episodes},
      {"finetune.stop_success", &c.finetune_stop_success},
      {"finetune.warmup_critic_updates", &c.finetune_warmup_critic_updates},
      {"finetune.normalize_weights", &c.finetune_normalize_weights},
      {"dual.lambda", &c.dual_lambda},
      {"dual.lr", &c.dual_lr},
      {"dual.lr_final", &c.dual_lr_final},
      {"dual.batch", &c.dual_batch},
      {"dual.hidden", &c.dual_hidden},
      {"dual.cost", &c.dual_cost},
      {"dual.weight_negq", &c.dual_weight_negq},
      {"dual.weight_relation", &c.dual_weight_relation},
      {"dual.normalization", &c.dual_normalization},
      {"dual.append_demo_actions", &c.dual_append_demo_actions},
      {"dual.grad_clip", &c.dual_grad_clip},
      {"critic.hidden", &c.critic_hidden},
      {"critic.discount", &c.critic_discount},
      {"critic.expectile", &c.critic_expectile},
      {"critic.lr", &c.critic_lr},
      {"critic.polyak", &c.critic_polyak},
      {"critic.batch", &c.critic_batch},
      {"buffer.capacity", &c.buffer_capacity},
      {"eval.episodes", &c.eval_episodes},
      {"eval.expert", &c.eval_expert},
      {"ablate.kind", &c.ablate_kind},
      {"ablate.seeds", &c.ablate_seeds},
      {"ot_debug.n", &c.ot_debug_n},
      {"ot_debug.m", &c.ot_debug_m},
      {"ot_debug.lambda", &c.ot_debug_lambda},
      {"ot_debug.iters", &c.ot_debug_iters},
      {"ot_debug.lr", &c.ot_debug_lr},
  };
}

void apply_assignment(RunConfig& config, std::string_view key, std::string_view value) {
  value = trim(value);
  for (Field& f : fields(config)) {
    if (f.key != key) continue;
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, int>) {
            *p = checked_cast<int>(key, value, parse_integer(key, value));
          } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            const long long x = parse_integer(key, value);
            if (x < 0) bad_value(key, value, "a non-negative integer");
            *p = static_cast<std::uint64_t>(x);
          } else if constexpr (std::is_same_v<T, double>) {
            *p = parse_double(key, value);
          } else if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1") *p = true;
            else if (value == "false" || value == "0") *p = false;
            else bad_value(key, value, "a boolean (true/false)");
          } else if constexpr (std::is_same_v<T, std::string>) {
            *p = std::string(value);
          } else if constexpr (std::is_same_v<T, std::optional<double>>) {
            if (value == "none" || value.empty()) *p = std::nullopt;
            else *p = parse_double(key, value);
          } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            p->clear();
            if (value == "none" || value.empty()) return;
            std::size_t start = 0;
            while (start <= value.size()) {
              const auto comma = value.find(',', start);
              const auto item =
                  trim(value.substr(start, comma == std::string_view::npos ? value.npos : comma - start));
              p->push_back(checked_cast<int>(key, item, parse_integer(key, item)));
              if (comma == std::string_view::npos) break;
              start = comma + 1;
            }
          }
        },
        f.ptr);
    return;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_text(RunConfig& config, std::string_view text) {
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == text.npos ? text.npos : nl - pos);
    pos = nl == text.npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != line.npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == line.npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    apply_assignment(config, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

RunConfig parse_config(std::string_view text) {
  RunConfig c;
  apply_text(c, text);
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const RunConfig& config) {
  RunConfig copy = config;
  std::ostringstream os;
  for (const Field& f : fields(copy)) {
    os << f.key << " = ";
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, double>) {
            os << format_double(*p);
          } else if constexpr (std::is_same_v<T, bool>) {
            os << (*p ? "true" : "false");
          } else if constexpr (std::is_same_v<T, std::optional<double>>) {
            os << (*p ? format_double(**p) : "none");
          } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            if (p->empty()) os << "none";
            for (std::size_t i = 0; i < p->size(); ++i) os << (i ? "," : "") << (*p)[i];
          } else {
            os << *p;
          }
        },
        f.ptr);
    os << "\n";
  }
  return os.str();
}

void RunConfig::validate() const {
  auto positive = [](const char* key, double v) {
    if (!(v > 0.0)) throw ConfigError(std::string("config key '") + key + "' must be positive");
  };
  auto at_least = [](const char* key, long long v, long long lo) {
    if (v < lo)
      throw ConfigError(std::string("config key '") + key + "' must be >= " + std::to_string(lo));
  };
  require_one_of("env.name", env_name, {"bandit2d", "pointmass", "multigoal_pointmass"});
  require_one_of("env.reward", env_reward, {"dense", "sparse"});
  at_least("env.horizon", env_horizon, 1);
  at_least("demos.count", demos_count, 1);
  for (int h : model_hidden) at_least("model.hidden", h, 1);
  require_one_of("model.schedule", model_schedule, {"vp", "ve"});
  require_one_of("model.sampler", model_sampler, {"ddim", "em"});
  at_least("model.sampler_steps", model_sampler_steps, 1);
  at_least("pretrain.epochs", pretrain_epochs, 0);
  at_least("pretrain.batch", pretrain_batch, 1);
  positive("pretrain.lr", pretrain_lr);
  at_least("pretrain.eval_episodes", pretrain_eval_episodes, 0);
  at_least("finetune.outer_iters", finetune_outer_iters, 0);
  at_least("finetune.episodes_per_iter", finetune_episodes_per_iter, 1);
  at_least("finetune.dual_iters", finetune_dual_iters, 0);
  at_least("finetune.critic_updates", finetune_critic_updates, 0);
  at_least("finetune.score_updates", finetune_score_updates, 0);
  at_least("finetune.proposals", finetune_proposals, 1);
  require_one_of("finetune.guidance", finetune_guidance, {"H", "Q", "A"});
  require_one_of("finetune.score_loss", finetune_score_loss, {"hdsm", "dsm"});
  at_least("finetune.actor_batch", finetune_actor_batch, 1);
  positive("finetune.actor_lr", finetune_actor_lr);
  positive("finetune.softmax_temperature", finetune_softmax_temperature);
  at_least("finetune.eval_episodes", finetune_eval_episodes, 1);
  at_least("finetune.warmup_critic_updates", finetune_warmup_critic_updates, 0);
  positive("dual.lambda", dual_lambda);
  positive("dual.lr", dual_lr);
  if (dual_lr_final) positive("dual.lr_final", *dual_lr_final);
  at_least("dual.batch", dual_batch, 1);
  for (int h : dual_hidden) at_least("dual.hidden", h, 1);
  require_one_of("dual.cost", dual_cost, {"auto", "negq", "relation", "weighted"});
  require_one_of("dual.normalization", dual_normalization, {"zscore", "none"});
  positive("dual.grad_clip", dual_grad_clip);
  for (int h : critic_hidden) at_least("critic.hidden", h, 1);
  if (!(critic_discount >= 0.0 && critic_discount <= 1.0))
    throw ConfigError("config key 'critic.discount' must lie in [0, 1]");
  if (!(critic_expectile > 0.0 && critic_expectile < 1.0))
    throw ConfigError("config key 'critic.expectile' must lie in (0, 1)");
  positive("critic.lr", critic_lr);
  if (!(critic_polyak > 0.0 && critic_polyak <= 1.0))
    throw ConfigError("config key 'critic.polyak' must lie in (0, 1]");
  at_least("critic.batch", critic_batch, 1);
  at_least("buffer.capacity", buffer_capacity, 1);
  at_least("eval.episodes", eval_episodes, 0);
  require_one_of("ablate.kind", ablate_kind, {"guidance", "mask"});
  if (ablate_seeds.empty()) throw ConfigError("config key 'ablate.seeds' must not be empty");
  for (int s : ablate_seeds) at_least("ablate.seeds", s, 0);
  at_least("ot_debug.n", ot_debug_n, 1);
  at_least("ot_debug.m", ot_debug_m, 1);
  positive("ot_debug.lambda", ot_debug_lambda);
  at_least("ot_debug.iters", ot_debug_iters, 0);
  positive("ot_debug.lr", ot_debug_lr);
}

}  // namespace otpr::config
