#include "ugp/shooter.hpp"

#include <algorithm>
#include <cstdlib>

#include "ugp/errors.hpp"

namespace ugp {

namespace {

constexpr std::uint64_t kShooterStream = 0x5400'7e12ULL;

int step_toward(int from, int to) { return from < to ? from + 1 : from > to ? from - 1 : from; }

std::uint8_t shade(double v) { return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0)); }

}  // namespace

void ShooterConfig::validate() const {
  if (width < 8 || height < 8) throw ConfigError("shooter grid must be at least 8x8");
  if (step_cap < 100) throw ConfigError("shooter step cap must be at least 100");
  if (kill_reward < 0.0) throw ConfigError("shooter kill reward must be nonnegative");
  if (column_lo >= column_hi || column_hi > width) throw ConfigError("shooter enemy column range is empty or too wide");
  if (enemy_rows == 0 || enemies_per_row == 0) throw ConfigError("shooter needs at least one enemy");
  if (move_period == 0 || bullet_speed == 0) throw ConfigError("shooter periods and speeds must be positive");
  if (sprite >= kShooterSprites) throw ConfigError("shooter sprite kind must be 0 or 1");
  if (view_shift >= width) throw ConfigError("shooter view shift must be smaller than the width");
  if (enemy_rows + 3 > height) throw ConfigError("shooter has too many enemy rows for its height");
  if (pattern == EnemyPattern::march_and_descend && enemies_per_row > column_hi - column_lo) {
    throw ConfigError("marching formation is wider than its column range");
  }
  if (!(enemy_fire_rate >= 0.0 && enemy_fire_rate <= 1.0) || !(dive_rate >= 0.0 && dive_rate <= 1.0)) {
    throw ConfigError("shooter rates must lie in [0, 1]");
  }
}

ShooterConfig shooter_config(std::string_view variant) {
  ShooterConfig c;
  c.variant = std::string(variant);
  if (variant == "shooter-a") {
    c.pattern = EnemyPattern::march_and_descend;
    c.enemy_rows = 2;
    c.enemies_per_row = 4;
    c.column_lo = 0;
    c.column_hi = 5;
    c.roaming_window = true;
    c.move_period = 2;
    c.enemy_fire_rate = 0.02;
    c.step_cap = 200;
  } else if (variant == "shooter-b") {
    c.pattern = EnemyPattern::swooping_dive;
    c.enemy_rows = 2;
    c.enemies_per_row = 3;
    c.column_lo = 6;
    c.column_hi = 12;
    c.move_period = 2;
    c.enemy_fire_rate = 0.06;
    c.dive_rate = 0.08;
    c.step_cap = 300;
    c.sprite = 1;
  } else if (variant == "shooter-c") {
    c.pattern = EnemyPattern::circling_respawn;
    c.enemy_rows = 1;
    c.enemies_per_row = 5;
    c.column_lo = 0;
    c.column_hi = 12;
    c.move_period = 2;
    c.enemy_fire_rate = 0.04;
    c.respawn_delay = 8;
    c.step_cap = 600;
    c.mixed_sprites = true;
    c.view_shift = 6;
  } else {
    throw LookupError("unknown shooter variant '" + std::string(variant) + "'");
  }
  c.validate();
  return c;
}

bool is_shooter_variant(std::string_view name) {
  return name == "shooter-a" || name == "shooter-b" || name == "shooter-c";
}

ShooterEnv::ShooterEnv(ShooterConfig config) : config_(std::move(config)) {
  config_.validate();
  state_.terminal = true;
}

FrameProfile ShooterEnv::frame_profile() const {
  return config_.image_profile ? FrameProfile::image(config_.height, config_.width, 1)
                               : FrameProfile::vector(kShooterBlocks * config_.width);
}

std::vector<Point> ShooterEnv::loop_path() const {
  const int lo = state_.window_lo;
  const int hi = window_hi() - 1;
  const int top = 1;
  const int bottom = std::min<int>(4, static_cast<int>(config_.height) - 4);
  std::vector<Point> path;
  for (int x = lo; x <= hi; ++x) path.push_back({x, top});
  for (int y = top + 1; y <= bottom; ++y) path.push_back({hi, y});
  for (int x = hi - 1; x >= lo; --x) path.push_back({x, bottom});
  for (int y = bottom - 1; y > top; --y) path.push_back({lo, y});
  return path;
}

int ShooterEnv::window_hi() const {
  return state_.window_lo + static_cast<int>(config_.column_hi - config_.column_lo);
}

int ShooterEnv::sprite_for(std::size_t index) const {
  return static_cast<int>(config_.mixed_sprites ? index % kShooterSprites : config_.sprite);
}

void ShooterEnv::spawn_wave() {
  auto& s = state_;
  const int lo = s.window_lo;
  const int span = window_hi() - lo;
  const int per_row = static_cast<int>(config_.enemies_per_row);
  s.enemies.clear();
  switch (config_.pattern) {
    case EnemyPattern::march_and_descend: {
      const int offset = static_cast<int>(s.rng.below(static_cast<std::uint64_t>(span - per_row + 1)));
      s.formation_dir = s.rng.chance(0.5) ? 1 : -1;
      for (std::size_t r = 0; r < config_.enemy_rows; ++r) {
        for (int i = 0; i < per_row; ++i) {
          Enemy e;
          e.x = e.home_x = lo + offset + i;
          e.y = e.home_y = 1 + static_cast<int>(r);
          e.sprite = sprite_for(s.enemies.size());
          s.enemies.push_back(e);
        }
      }
      break;
    }
    case EnemyPattern::swooping_dive: {
      for (std::size_t r = 0; r < config_.enemy_rows; ++r) {
        for (int i = 0; i < per_row; ++i) {
          Enemy e;
          e.x = e.home_x = lo + (2 * i + 1) * span / (2 * per_row) - static_cast<int>(r % 2);
          e.y = e.home_y = 1 + static_cast<int>(r);
          e.sprite = sprite_for(s.enemies.size());
          s.enemies.push_back(e);
        }
      }
      break;
    }
    case EnemyPattern::circling_respawn: {
      const auto path = loop_path();
      const int n = static_cast<int>(config_.enemy_rows * config_.enemies_per_row);
      const int phase = static_cast<int>(s.rng.below(path.size()));
      const int L = static_cast<int>(path.size());
      for (int i = 0; i < n; ++i) {
        Enemy e;
        e.loop_index = (phase + i * L / n) % L;
        e.x = path[e.loop_index].x;
        e.y = path[e.loop_index].y;
        e.sprite = sprite_for(s.enemies.size());
        s.enemies.push_back(e);
      }
      break;
    }
  }
}

Observation ShooterEnv::reset(std::uint64_t seed) {
  state_ = ShooterState{};
  state_.rng = CounterRng(derive_key(seed, kShooterStream));
  state_.player = static_cast<int>(state_.rng.below(config_.width));
  state_.window_lo = static_cast<int>(config_.column_lo);
  if (config_.roaming_window) {
    const std::size_t span = config_.column_hi - config_.column_lo;
    state_.window_lo = static_cast<int>(state_.rng.below(config_.width - span + 1));
  }
  spawn_wave();
  return observe(0.0);
}

int ShooterEnv::advance_player_bullet() {
  auto& s = state_;
  if (!s.player_bullet) return 0;
  for (std::size_t i = 0; i < config_.bullet_speed; ++i) {
    s.player_bullet->y -= 1;
    if (s.player_bullet->y < 0) {
      s.player_bullet.reset();
      return 0;
    }
    if (int kills = resolve_bullet_hits()) return kills;
  }
  return 0;
}

int ShooterEnv::resolve_bullet_hits() {
  auto& s = state_;
  if (!s.player_bullet) return 0;
  for (Enemy& e : s.enemies) {
    if (e.alive && e.x == s.player_bullet->x && e.y == s.player_bullet->y) {
      e.alive = false;
      e.diving = 0;
      e.respawn_in = static_cast<int>(config_.respawn_delay);
      s.player_bullet.reset();
      return 1;
    }
  }
  return 0;
}

void ShooterEnv::move_formation() {
  auto& s = state_;
  if (s.steps % config_.move_period != 0) return;
  int min_x = static_cast<int>(config_.width);
  int max_x = -1;
  for (const Enemy& e : s.enemies) {
    if (!e.alive) continue;
    min_x = std::min(min_x, e.x);
    max_x = std::max(max_x, e.x);
  }
  if (max_x < 0) return;
  const bool blocked = min_x + s.formation_dir < s.window_lo || max_x + s.formation_dir >= window_hi();
  for (Enemy& e : s.enemies) {
    if (!e.alive) continue;
    if (blocked) {
      e.y += 1;
    } else {
      e.x += s.formation_dir;
    }
  }
  if (blocked) s.formation_dir = -s.formation_dir;
}

void ShooterEnv::move_divers() {
  auto& s = state_;
  const int lo = s.window_lo;
  const int hi = window_hi() - 1;
  const int floor_row = static_cast<int>(config_.height) - 3;
  bool any_diving = false;
  for (Enemy& e : s.enemies) {
    if (!e.alive) continue;
    if (e.diving == 1) {
      e.y += 1;
      e.x = std::clamp(step_toward(e.x, s.player), lo, hi);
      if (e.y >= floor_row) e.diving = -1;
    } else if (e.diving == -1) {
      e.y -= 1;
      e.x = step_toward(e.x, e.home_x);
      if (e.y <= e.home_y) {
        e.y = e.home_y;
        e.x = e.home_x;
        e.diving = 0;
      }
    } else if (s.steps % config_.move_period == 0) {
      const bool shifted = (s.steps / config_.move_period) % 2 == 1;
      e.x = std::clamp(e.home_x + (shifted ? 1 : 0), lo, hi);
    }
    any_diving = any_diving || e.diving != 0;
  }
  if (!any_diving && s.rng.chance(config_.dive_rate)) {
    std::vector<Enemy*> idle;
    for (Enemy& e : s.enemies) {
      if (e.alive) idle.push_back(&e);
    }
    if (!idle.empty()) idle[s.rng.below(idle.size())]->diving = 1;
  }
}

void ShooterEnv::move_circlers() {
  auto& s = state_;
  if (s.steps % config_.move_period != 0) return;
  const auto path = loop_path();
  for (Enemy& e : s.enemies) {
    e.loop_index = (e.loop_index + 1) % static_cast<int>(path.size());
    e.x = path[e.loop_index].x;
    e.y = path[e.loop_index].y;
  }
}

void ShooterEnv::move_enemies() {
  switch (config_.pattern) {
    case EnemyPattern::march_and_descend:
      move_formation();
      break;
    case EnemyPattern::swooping_dive:
      move_divers();
      break;
    case EnemyPattern::circling_respawn:
      move_circlers();
      break;
  }
}

void ShooterEnv::enemy_fire() {
  auto& s = state_;
  if (!s.rng.chance(config_.enemy_fire_rate)) return;
  std::vector<const Enemy*> alive;
  for (const Enemy& e : s.enemies) {
    if (e.alive) alive.push_back(&e);
  }
  if (alive.empty()) return;
  const Enemy* shooter = alive[s.rng.below(alive.size())];
  s.enemy_bullets.push_back({shooter->x, shooter->y + 1});
}

bool ShooterEnv::advance_enemy_bullets() {
  auto& s = state_;
  const int player_row = static_cast<int>(config_.height) - 1;
  bool hit = false;
  std::vector<Point> kept;
  for (Point b : s.enemy_bullets) {
    b.y += 1;
    if (b.y == player_row && b.x == s.player) {
      hit = true;
      continue;
    }
    if (b.y <= player_row) kept.push_back(b);
  }
  s.enemy_bullets = std::move(kept);
  return hit;
}

void ShooterEnv::respawn() {
  if (config_.pattern != EnemyPattern::circling_respawn) return;
  for (Enemy& e : state_.enemies) {
    if (e.alive) continue;
    if (--e.respawn_in <= 0) e.alive = true;
  }
}

Observation ShooterEnv::step(std::size_t action) {
  auto& s = state_;
  if (s.terminal) throw ContractViolation("shooter stepped after a terminal observation; reset first");
  if (action >= kShooterActions) throw IndexError("shooter action " + std::to_string(action) + " out of range");

  switch (static_cast<ShooterAction>(action)) {
    case ShooterAction::left:
      s.player = std::max(0, s.player - 1);
      break;
    case ShooterAction::right:
      s.player = std::min(static_cast<int>(config_.width) - 1, s.player + 1);
      break;
    case ShooterAction::fire:
      if (!s.player_bullet) s.player_bullet = Point{s.player, static_cast<int>(config_.height) - 1};
      break;
    case ShooterAction::noop:
      break;
  }

  int kills = advance_player_bullet();
  move_enemies();
  kills += resolve_bullet_hits();
  const bool shot = advance_enemy_bullets();
  enemy_fire();
  respawn();

  const int player_row = static_cast<int>(config_.height) - 1;
  bool invaded = false;
  bool any_alive = false;
  for (const Enemy& e : s.enemies) {
    if (!e.alive) continue;
    any_alive = true;
    if (e.y >= player_row) invaded = true;
  }

  ++s.steps;
  const double reward = config_.kill_reward * kills;
  s.score += reward;
  s.player_hit = shot || invaded;
  const bool cleared = !any_alive && config_.pattern != EnemyPattern::circling_respawn;
  s.terminal = s.player_hit || cleared || s.steps >= config_.step_cap;
  return observe(reward);
}

Observation ShooterEnv::observe(double reward) const {
  const auto& s = state_;
  const std::size_t w = config_.width;
  const double h = static_cast<double>(config_.height);
  const auto view = [&](int x) {
    return static_cast<int>((static_cast<std::size_t>(x) + config_.view_shift) % w);
  };
  Observation obs;
  obs.reward = reward;
  obs.terminal = s.terminal;

  if (config_.image_profile) {
    obs.height = config_.height;
    obs.width = w;
    obs.channels = 1;
    obs.pixels.assign(config_.height * w, 0);
    auto put = [&](int x, int y, double v) {
      if (x >= 0 && y >= 0 && x < static_cast<int>(w) && y < static_cast<int>(config_.height)) {
        obs.pixels[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = shade(v);
      }
    };
    for (const Enemy& e : s.enemies) {
      if (e.alive) put(view(e.x), e.y, e.sprite == 0 ? 160 : 128);
    }
    for (const Point& b : s.enemy_bullets) put(view(b.x), b.y, 96);
    if (s.player_bullet) put(view(s.player_bullet->x), s.player_bullet->y, 200);
    put(s.player, static_cast<int>(config_.height) - 1, 255);
    return obs;
  }

  obs.features.assign(kShooterBlocks * w, 0.0);
  obs.features[static_cast<std::size_t>(s.player)] = 1.0;
  for (const Enemy& e : s.enemies) {
    if (!e.alive || e.x < 0 || e.x >= static_cast<int>(w) || e.y < 0) continue;
    double& slot = obs.features[(1 + static_cast<std::size_t>(e.sprite)) * w + static_cast<std::size_t>(view(e.x))];
    slot = std::max(slot, (e.y + 1) / h);
  }
  for (const Point& b : s.enemy_bullets) {
    if (b.x < 0 || b.x >= static_cast<int>(w) || b.y < 0 || b.y >= static_cast<int>(config_.height)) continue;
    double& slot = obs.features[3 * w + static_cast<std::size_t>(view(b.x))];
    slot = std::max(slot, (b.y + 1) / h);
  }
  if (s.player_bullet) obs.features[4 * w + static_cast<std::size_t>(view(s.player_bullet->x))] = (s.player_bullet->y + 1) / h;
  return obs;
}

std::unique_ptr<Environment> make_shooter(std::string_view variant, bool image_profile) {
  ShooterConfig config = shooter_config(variant);
  config.image_profile = image_profile;
  return std::make_unique<ShooterEnv>(std::move(config));
}

std::size_t track_and_fire_action(const ShooterState& state, const ShooterConfig& config) {
  (void)config;
  const Enemy* target = nullptr;
  for (const Enemy& e : state.enemies) {
    if (!e.alive) continue;
    if (!target) {
      target = &e;
      continue;
    }
    const int d = std::abs(e.x - state.player);
    const int best = std::abs(target->x - state.player);
    if (d < best || (d == best && e.y > target->y)) target = &e;
  }
  if (!target) return static_cast<std::size_t>(ShooterAction::noop);
  if (target->x < state.player) return static_cast<std::size_t>(ShooterAction::left);
  if (target->x > state.player) return static_cast<std::size_t>(ShooterAction::right);
  return static_cast<std::size_t>(state.player_bullet ? ShooterAction::noop : ShooterAction::fire);
}

}  // namespace ugp
