//! Scripted modelled-agent behaviours.

use serde::{Deserialize, Serialize};

use crate::envs::dsl::{COLOUR_OFFSET, MESSAGE_OFFSET, N_COLOURS, N_MESSAGES};
use crate::envs::lbf::{Cell, LbfConfig, LbfEntity, LbfView, EAST, LOAD, NORTH, SOUTH, WEST};
use crate::envs::pp;
use crate::error::{Error, Result};

/// Foraging rules i-iv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbfRule {
    /// Closest food.
    Closest,
    /// Food closest to the centre of the visible players.
    Centre,
    /// Closest food whose level does not exceed the agent's own.
    Compatible,
    /// Food closest to all visible players whose level the group can load.
    Joint,
}

impl LbfRule {
    pub const ALL: [LbfRule; 4] = [LbfRule::Closest, LbfRule::Centre, LbfRule::Compatible, LbfRule::Joint];
}

/// Pursuit rules i-iv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpRule {
    Prey,
    /// A fixed other predator: the lowest-indexed predator that is not self.
    Designated,
    Closest,
    ClosestPredator,
}

impl PpRule {
    pub const ALL: [PpRule; 4] = [PpRule::Prey, PpRule::Designated, PpRule::Closest, PpRule::ClosestPredator];
}

fn lowest_cell(foods: impl Iterator<Item = (f64, LbfEntity)>) -> Option<LbfEntity> {
    foods
        .min_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then((a.1.cell.row, a.1.cell.col).cmp(&(b.1.cell.row, b.1.cell.col)))
        })
        .map(|(_, f)| f)
}

/// Target food under `rule`, or `None` when no food is visible. Rules with no
/// qualifying food fall back to the closest food.
pub fn lbf_heuristic_target(rule: LbfRule, view: &LbfView) -> Option<LbfEntity> {
    let me = view.me;
    let foods = || view.foods.iter().map(|(_, f)| *f);
    let dist = |f: &LbfEntity| f.cell.manhattan(me.cell) as f64;
    let closest = lowest_cell(foods().map(|f| (dist(&f), f)));
    let players: Vec<LbfEntity> = std::iter::once(me).chain(view.other).collect();
    let picked = match rule {
        LbfRule::Closest => closest,
        LbfRule::Centre => {
            let n = players.len() as f64;
            let cr = players.iter().map(|p| p.cell.row as f64).sum::<f64>() / n;
            let cc = players.iter().map(|p| p.cell.col as f64).sum::<f64>() / n;
            lowest_cell(foods().map(|f| ((f.cell.row as f64 - cr).abs() + (f.cell.col as f64 - cc).abs(), f)))
        }
        LbfRule::Compatible => lowest_cell(foods().filter(|f| f.level <= me.level).map(|f| (dist(&f), f))),
        LbfRule::Joint => {
            let total: u32 = players.iter().map(|p| p.level).sum();
            lowest_cell(foods().filter(|f| f.level <= total).map(|f| {
                let d: usize = players.iter().map(|p| p.cell.manhattan(f.cell)).sum();
                (d as f64, f)
            }))
        }
    };
    picked.or(closest)
}

/// Grid step toward `target`: load when adjacent, otherwise shrink the
/// larger axis gap first (vertical on ties).
pub fn lbf_step_toward(me: Cell, target: Cell) -> usize {
    if me.manhattan(target) <= 1 {
        return LOAD;
    }
    let dr = target.row as i64 - me.row as i64;
    let dc = target.col as i64 - me.col as i64;
    if dr.abs() >= dc.abs() {
        if dr > 0 {
            SOUTH
        } else {
            NORTH
        }
    } else if dc > 0 {
        EAST
    } else {
        WEST
    }
}

/// Restricts a full view to entities within `radius` (Chebyshev).
pub fn restrict_view(view: &LbfView, radius: usize) -> LbfView {
    let me = view.me.cell;
    LbfView {
        me: view.me,
        other: view.other.filter(|o| o.cell.chebyshev(me) <= radius),
        foods: view.foods.iter().copied().filter(|(_, f)| f.cell.chebyshev(me) <= radius).collect(),
    }
}

/// Deterministic foraging action; falls back to a random move when no food is
/// visible, which callers supply via `wander`.
pub fn lbf_action(cfg: &LbfConfig, rule: LbfRule, view_radius: Option<usize>, obs: &[f64], wander: usize) -> Result<usize> {
    let mut view = LbfView::parse(cfg, obs)?;
    if let Some(r) = view_radius {
        view = restrict_view(&view, r);
    }
    Ok(match lbf_heuristic_target(rule, &view) {
        Some(food) => lbf_step_toward(view.me.cell, food.cell),
        None => wander,
    })
}

/// Agent id targeted by predator `me` under `rule`, from the positions of all
/// agents.
pub fn pp_heuristic_target(rule: PpRule, me: usize, positions: &[[f64; 2]]) -> usize {
    let d = |j: usize| {
        let (a, b) = (positions[me], positions[j]);
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
    };
    let nearest = |cands: &mut dyn Iterator<Item = usize>| {
        cands.min_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b))).unwrap_or(0)
    };
    match rule {
        PpRule::Prey => 0,
        PpRule::Designated => (1..positions.len()).find(|&j| j != me).unwrap_or(0),
        PpRule::Closest => nearest(&mut (0..positions.len()).filter(|&j| j != me)),
        PpRule::ClosestPredator => nearest(&mut (1..positions.len()).filter(|&j| j != me)),
    }
}

/// Movement toward a relative offset: larger axis first, vertical on ties.
pub fn particle_step_toward(delta: [f64; 2], deadband: f64) -> usize {
    let (ax, ay) = (delta[0].abs(), delta[1].abs());
    if ax.max(ay) < deadband {
        0
    } else if ay >= ax {
        if delta[1] > 0.0 {
            3
        } else {
            4
        }
    } else if delta[0] > 0.0 {
        1
    } else {
        2
    }
}

/// Predator action from its own (full-information) observation.
pub fn pp_action(rule: PpRule, me: usize, obs: &[f64]) -> Result<usize> {
    if obs.len() != pp::OBS_LEN {
        return Err(Error::dim("pp_policy", format!("observation has {} values, layout needs {}", obs.len(), pp::OBS_LEN)));
    }
    let layout = pp::layout();
    let (rel, _) = layout.range("other_rel").expect("layout has other_rel");
    let mut positions = vec![[0.0; 2]; pp::N_AGENTS];
    for (slot, j) in pp::others(me).enumerate() {
        positions[j] = [obs[rel + 2 * slot], obs[rel + 2 * slot + 1]];
    }
    let target = pp_heuristic_target(rule, me, &positions);
    Ok(particle_step_toward(positions[target], 0.0))
}

/// Scripted speaker-listener partner parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Navigator {
    /// No movement once both axis gaps are below this.
    pub deadband: f64,
    /// Velocity look-ahead in seconds subtracted from the landmark offset.
    pub lead: f64,
}

impl Navigator {
    /// Ten distinct navigator settings.
    pub fn variants() -> Vec<Navigator> {
        let mut v = Vec::new();
        for &lead in &[0.0, 0.5] {
            for &deadband in &[0.02, 0.05, 0.1, 0.15, 0.2] {
                v.push(Navigator { deadband, lead });
            }
        }
        v
    }
}

/// Speaker-listener partner: announces the partner's colour with its private
/// message code and walks to the landmark named by the partner's message,
/// decoded with the same code. Unknown or missing messages mean standing
/// still.
pub fn dsl_action(message_map: &[usize; N_COLOURS], nav: &Navigator, obs: &[f64]) -> Result<[usize; 2]> {
    if obs.len() != crate::envs::dsl::OBS_LEN {
        return Err(Error::dim(
            "dsl_policy",
            format!("observation has {} values, layout needs {}", obs.len(), crate::envs::dsl::OBS_LEN),
        ));
    }
    let colour_slice = &obs[COLOUR_OFFSET..COLOUR_OFFSET + N_COLOURS];
    let partner_colour = argmax(colour_slice);
    let message = message_map[partner_colour];

    let msg = &obs[MESSAGE_OFFSET..MESSAGE_OFFSET + N_MESSAGES];
    let heard = msg.iter().position(|v| *v > 0.5);
    let goal = heard.and_then(|m| message_map.iter().position(|&x| x == m));
    let mv = match goal {
        Some(c) => {
            let vel = [obs[0], obs[1]];
            let delta = [obs[2 + 2 * c] - nav.lead * vel[0], obs[3 + 2 * c] - nav.lead * vel[1]];
            particle_step_toward(delta, nav.deadband)
        }
        None => 0,
    };
    Ok([mv, message])
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(row: usize, col: usize, level: u32) -> LbfEntity {
        LbfEntity { cell: Cell::new(row, col), level }
    }

    fn view(me: LbfEntity, other: Option<LbfEntity>, foods: &[LbfEntity]) -> LbfView {
        LbfView { me, other, foods: foods.iter().copied().enumerate().collect() }
    }

    #[test]
    fn one_food_every_rule_returns_it() {
        let v = view(ent(0, 0, 1), Some(ent(5, 5, 1)), &[ent(3, 3, 6)]);
        for r in LbfRule::ALL {
            assert_eq!(lbf_heuristic_target(r, &v), Some(ent(3, 3, 6)));
        }
    }

    #[test]
    fn closest_versus_compatible() {
        // Level-5 food two cells away, level-1 food four cells away, agent level 1.
        let v = view(ent(4, 4, 1), None, &[ent(4, 6, 5), ent(8, 4, 1)]);
        assert_eq!(lbf_heuristic_target(LbfRule::Closest, &v), Some(ent(4, 6, 5)));
        assert_eq!(lbf_heuristic_target(LbfRule::Compatible, &v), Some(ent(8, 4, 1)));
    }

    #[test]
    fn ties_break_on_lowest_cell() {
        let v = view(ent(5, 5, 1), None, &[ent(5, 7, 1), ent(3, 5, 1), ent(7, 5, 1)]);
        assert_eq!(lbf_heuristic_target(LbfRule::Closest, &v), Some(ent(3, 5, 1)));
    }

    #[test]
    fn no_compatible_food_falls_back_to_closest() {
        let v = view(ent(0, 0, 1), None, &[ent(2, 2, 3), ent(5, 5, 2)]);
        assert_eq!(lbf_heuristic_target(LbfRule::Compatible, &v), Some(ent(2, 2, 3)));
        assert_eq!(lbf_heuristic_target(LbfRule::Joint, &v), Some(ent(2, 2, 3)));
    }

    #[test]
    fn joint_rule_uses_group_level_and_distance() {
        // Group level 3 can load the level-3 food, which minimises total distance.
        let v = view(ent(0, 0, 1), Some(ent(0, 8, 2)), &[ent(1, 1, 6), ent(2, 4, 3)]);
        assert_eq!(lbf_heuristic_target(LbfRule::Joint, &v), Some(ent(2, 4, 3)));
        assert_eq!(lbf_heuristic_target(LbfRule::Centre, &v), Some(ent(2, 4, 3)));
    }

    #[test]
    fn grid_step_examples() {
        // Food at (3,3), agent at (3,5): step west, shrinking the gap.
        let a = lbf_step_toward(Cell::new(3, 5), Cell::new(3, 3));
        assert_eq!(a, WEST);
        assert_eq!(lbf_step_toward(Cell::new(3, 4), Cell::new(3, 3)), LOAD);
        assert_eq!(lbf_step_toward(Cell::new(5, 5), Cell::new(3, 3)), NORTH, "tie goes vertical");
        assert_eq!(lbf_step_toward(Cell::new(3, 0), Cell::new(4, 3)), EAST);
    }

    #[test]
    fn pp_rules() {
        let pos = [[0.0, 0.0], [0.5, 0.5], [0.6, 0.5], [-0.9, 0.9]];
        assert_eq!(pp_heuristic_target(PpRule::Prey, 2, &pos), 0);
        assert_eq!(pp_heuristic_target(PpRule::Designated, 1, &pos), 2);
        assert_eq!(pp_heuristic_target(PpRule::Designated, 3, &pos), 1);
        assert_eq!(pp_heuristic_target(PpRule::Closest, 1, &pos), 2);
        let near_prey = [[0.45, 0.5], [0.5, 0.5], [0.9, 0.9], [-0.9, 0.9]];
        assert_eq!(pp_heuristic_target(PpRule::Closest, 1, &near_prey), 0);
    }

    #[test]
    fn closest_predator_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let pos: Vec<[f64; 2]> = (0..4).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            for me in 1..4 {
                let mut best = (f64::INFINITY, 0);
                for j in 1..4 {
                    if j == me {
                        continue;
                    }
                    let d = ((pos[me][0] - pos[j][0]).powi(2) + (pos[me][1] - pos[j][1]).powi(2)).sqrt();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                assert_eq!(pp_heuristic_target(PpRule::ClosestPredator, me, &pos), best.1);
            }
        }
    }

    #[test]
    fn particle_step_prefers_larger_axis() {
        // Prey north-east of predator, further east than north: move east.
        assert_eq!(particle_step_toward([0.5, 0.2], 0.0), 1);
        assert_eq!(particle_step_toward([0.2, 0.5], 0.0), 3);
        assert_eq!(particle_step_toward([-0.3, 0.3], 0.0), 3);
        assert_eq!(particle_step_toward([0.01, 0.0], 0.05), 0);
    }

    #[test]
    fn dsl_emits_mapped_message_for_partner_colour() {
        let map = [2, 0, 4];
        let nav = Navigator { deadband: 0.05, lead: 0.0 };
        let mut obs = vec![0.0; 18];
        obs[COLOUR_OFFSET] = 1.0; // partner is colour 0
        for _ in 0..5 {
            assert_eq!(dsl_action(&map, &nav, &obs).unwrap(), [0, 2]);
        }
        // Partner says message 4, which this code reads as colour 2.
        obs[MESSAGE_OFFSET + 4] = 1.0;
        obs[2 + 4] = -0.7;
        obs[2 + 5] = 0.1;
        assert_eq!(dsl_action(&map, &nav, &obs).unwrap(), [2, 2]);
        // An unmapped message means no movement.
        obs[MESSAGE_OFFSET + 4] = 0.0;
        obs[MESSAGE_OFFSET + 1] = 1.0;
        assert_eq!(dsl_action(&map, &nav, &obs).unwrap()[0], 0);
        assert!(matches!(dsl_action(&map, &nav, &obs[..10]), Err(Error::Dimension { .. })));
    }
}
