#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ugp/env.hpp"
#include "ugp/rng.hpp"

namespace ugp {

/// How the enemy wave moves.
enum class EnemyPattern {
  march_and_descend,  // formation sweeps sideways and drops a row at each edge
  swooping_dive,      // enemies hover near home slots and take turns diving at the player
  circling_respawn,   // enemies circle a loop; killed enemies come back after a delay
};

enum class ShooterAction : std::size_t { noop = 0, left = 1, right = 2, fire = 3 };
inline constexpr std::size_t kShooterActions = 4;
inline constexpr std::size_t kShooterSprites = 2;
inline constexpr std::size_t kShooterBlocks = 5;

struct ShooterConfig {
  std::string variant = "shooter-a";
  EnemyPattern pattern = EnemyPattern::march_and_descend;
  std::size_t width = 12;
  std::size_t height = 10;
  std::size_t enemy_rows = 1;
  std::size_t enemies_per_row = 4;
  /// Enemies live in columns [column_lo, column_hi).
  std::size_t column_lo = 0;
  std::size_t column_hi = 12;
  /// Slide that window to a random position each episode, so the enemies have
  /// to be found on screen rather than waited for in a fixed spot.
  bool roaming_window = false;
  /// Enemies move once every `move_period` ticks.
  std::size_t move_period = 2;
  double enemy_fire_rate = 0.02;
  /// Per-tick chance that an idle enemy starts a dive (swooping pattern).
  double dive_rate = 0.05;
  /// Ticks before a killed enemy returns (circling pattern).
  std::size_t respawn_delay = 8;
  std::size_t step_cap = 200;
  double kill_reward = 1.0;
  std::size_t bullet_speed = 2;
  /// Enemy look: every enemy uses `sprite` unless `mixed_sprites` alternates
  /// the two kinds.
  std::size_t sprite = 0;
  bool mixed_sprites = false;
  /// Camera offset: enemies and bullets are drawn this many columns to the
  /// right (wrapping) of where they are, the player is not. Changes what the
  /// screen looks like without changing the game.
  std::size_t view_shift = 0;
  bool image_profile = false;

  void validate() const;
};

/// Presets for "shooter-a", "shooter-b" and "shooter-c"; LookupError otherwise.
ShooterConfig shooter_config(std::string_view variant);
bool is_shooter_variant(std::string_view name);

struct Enemy {
  int x = 0;
  int y = 0;
  bool alive = true;
  int home_x = 0;
  int home_y = 0;
  int diving = 0;       // 0 idle, 1 descending, -1 returning
  int loop_index = 0;   // position on the circling loop
  int respawn_in = 0;
  int sprite = 0;
};

struct Point {
  int x = 0;
  int y = 0;
};

struct ShooterState {
  int player = 0;
  std::vector<Enemy> enemies;
  std::optional<Point> player_bullet;
  std::vector<Point> enemy_bullets;
  int formation_dir = 1;
  /// First column of this episode's enemy window.
  int window_lo = 0;
  std::size_t steps = 0;
  double score = 0.0;
  bool terminal = false;
  bool player_hit = false;
  CounterRng rng{0};
};

/// Deterministic bottom-up shooter on a small grid.
///
/// The vector observation has five width-long blocks: player column one-hot,
/// nearest height per column of sprite-0 enemies, the same for sprite-1
/// enemies, nearest enemy-bullet height per column and the player's own bullet
/// height per column, all in [0, 1].
class ShooterEnv : public Environment {
 public:
  explicit ShooterEnv(ShooterConfig config);

  Observation reset(std::uint64_t seed) override;
  Observation step(std::size_t action) override;
  [[nodiscard]] std::size_t action_count() const override { return kShooterActions; }
  [[nodiscard]] FrameProfile frame_profile() const override;

  [[nodiscard]] const ShooterConfig& config() const noexcept { return config_; }
  [[nodiscard]] const ShooterState& state() const noexcept { return state_; }
  /// Test hook: replaces the dynamic state (e.g. to stage a single enemy).
  void set_state(ShooterState state) { state_ = std::move(state); }

  [[nodiscard]] Observation observe(double reward) const;

 private:
  void spawn_wave();
  int advance_player_bullet();
  int resolve_bullet_hits();
  void move_enemies();
  void move_formation();
  void move_divers();
  void move_circlers();
  void enemy_fire();
  bool advance_enemy_bullets();
  void respawn();
  [[nodiscard]] std::vector<Point> loop_path() const;
  [[nodiscard]] int window_hi() const;
  [[nodiscard]] int sprite_for(std::size_t index) const;

  ShooterConfig config_;
  ShooterState state_;
};

std::unique_ptr<Environment> make_shooter(std::string_view variant, bool image_profile = false);

/// Scripted baseline: move under the nearest enemy column and fire when aligned.
std::size_t track_and_fire_action(const ShooterState& state, const ShooterConfig& config);

}  // namespace ugp
