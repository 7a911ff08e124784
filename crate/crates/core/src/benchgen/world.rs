use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::WorldConfig;
use crate::encoders::{ClutterObject, SyntheticImage};
use crate::error::Result;
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: u32,
    pub category_id: u32,
    /// Unit identity latent.
    pub identity: Vec<f64>,
    /// Reserve instances only appear as gallery distractors and clutter.
    pub reserve: bool,
    pub ambients: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub prototypes: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
    pub ambients: Vec<Vec<f64>>,
    pub instances: Vec<InstanceRecord>,
    pub images: Vec<SyntheticImage>,
}

impl World {
    pub fn image(&self, id: u32) -> &SyntheticImage {
        &self.images[id as usize]
    }

    pub fn instance(&self, id: u32) -> &InstanceRecord {
        &self.instances[id as usize]
    }

    /// Images grouped by instance, in id order.
    pub fn images_by_instance(&self) -> Vec<Vec<&SyntheticImage>> {
        let mut sets = vec![Vec::new(); self.instances.len()];
        for img in &self.images {
            sets[img.instance_id as usize].push(img);
        }
        sets
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A box spanning `h × w` cells at `(r, c)`, with each edge jittered by less
/// than half a cell so the covered cell centers stay the same.
fn jittered_box(rng: &mut ChaCha8Rng, grid: (usize, usize), r: usize, c: usize, h: usize, w: usize) -> BBox {
    let (gh, gw) = (grid.0 as f64, grid.1 as f64);
    let mut j = || rng.random_range(-0.45..0.45);
    let x0 = ((c as f64 + j()) / gw).max(0.0);
    let x1 = (((c + w) as f64 + j()) / gw).min(1.0);
    let y0 = ((r as f64 + j()) / gh).max(0.0);
    let y1 = (((r + h) as f64 + j()) / gh).min(1.0);
    BBox { x0, y0, x1, y1 }
}

struct Placement {
    r: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Placement {
    fn overlaps(&self, o: &Placement) -> bool {
        self.r < o.r + o.h && o.r < self.r + self.h && self.c < o.c + o.w && o.c < self.c + self.w
    }

    fn covers(&self, row: usize, col: usize) -> bool {
        (self.r..self.r + self.h).contains(&row) && (self.c..self.c + self.w).contains(&col)
    }
}

fn random_placement(rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> Placement {
    let (lo, hi) = cfg.bbox_cells;
    let h = rng.random_range(lo..=hi);
    let w = rng.random_range(lo..=hi);
    let r = rng.random_range(0..=cfg.grid.0 - h);
    let c = rng.random_range(0..=cfg.grid.1 - w);
    Placement { r, c, h, w }
}

struct ImageSpec<'a> {
    image_id: u32,
    instance: &'a InstanceRecord,
    context_id: u32,
    ambient_id: u32,
}

fn render(rng: &mut ChaCha8Rng, cfg: &WorldConfig, world: &World, spec: ImageSpec<'_>, clutter_pool: &[u32]) -> SyntheticImage {
    let (gh, gw) = cfg.grid;
    let d = cfg.d_latent;
    let main = random_placement(rng, cfg);
    let mut placed = vec![main];
    let mut clutter_ids = Vec::new();
    let n_clutter = rng.random_range(cfg.clutter.0..=cfg.clutter.1);
    let candidates: Vec<u32> = clutter_pool.iter().copied().filter(|&i| i != spec.instance.instance_id).collect();
    for _ in 0..n_clutter {
        let Some(&id) = candidates.choose(rng) else { break };
        for _ in 0..50 {
            let p = random_placement(rng, cfg);
            if placed.iter().all(|q| !q.overlaps(&p)) {
                placed.push(p);
                clutter_ids.push(id);
                break;
            }
        }
    }
    let mut latents = Vec::with_capacity(gh * gw * d);
    for row in 0..gh {
        for col in 0..gw {
            let owner = placed.iter().position(|p| p.covers(row, col));
            let base: &[f64] = match owner {
                Some(0) => &spec.instance.identity,
                Some(k) => &world.instances[clutter_ids[k - 1] as usize].identity,
                None if rng.random_bool(cfg.ambient_fraction) => &world.ambients[spec.ambient_id as usize],
                None => &world.contexts[spec.context_id as usize],
            };
            for &b in base {
                let n: f64 = StandardNormal.sample(rng);
                latents.push(b + cfg.noise * n);
            }
        }
    }
    let boxes: Vec<BBox> = placed.iter().map(|p| jittered_box(rng, cfg.grid, p.r, p.c, p.h, p.w)).collect();
    SyntheticImage {
        image_id: spec.image_id,
        instance_id: spec.instance.instance_id,
        category_id: spec.instance.category_id,
        context_id: spec.context_id,
        ambient_id: spec.ambient_id,
        grid: cfg.grid,
        d_latent: d,
        latents,
        bbox: boxes[0],
        clutter: clutter_ids
            .iter()
            .zip(&boxes[1..])
            .map(|(&instance_id, &bbox)| ClutterObject { instance_id, bbox })
            .collect(),
    }
}

/// Generates instances (regular then reserve, per category), scene and
/// ambient latents, and every image.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_latent;
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_categories).map(|_| unit(gaussian(&mut rng, d))).collect();
    let contexts: Vec<Vec<f64>> = (0..cfg.n_contexts).map(|_| unit(gaussian(&mut rng, d))).collect();
    let ambients: Vec<Vec<f64>> = (0..cfg.n_ambients).map(|_| unit(gaussian(&mut rng, d))).collect();
    let scale = cfg.instance_spread / (d as f64).sqrt();
    let mut instances = Vec::new();
    let all_ambients: Vec<u32> = (0..cfg.n_ambients as u32).collect();
    for reserve in [false, true] {
        let per = if reserve { cfg.reserve_per_category } else { cfg.instances_per_category };
        for (cat, proto) in prototypes.iter().enumerate() {
            for _ in 0..per {
                let g = gaussian(&mut rng, d);
                let identity = unit(proto.iter().zip(&g).map(|(p, n)| p + scale * n).collect());
                let ambients = all_ambients.choose_multiple(&mut rng, cfg.ambients_per_instance).copied().collect();
                instances.push(InstanceRecord {
                    instance_id: instances.len() as u32,
                    category_id: cat as u32,
                    identity,
                    reserve,
                    ambients,
                });
            }
        }
    }
    let mut world = World {
        config: cfg.clone(),
        prototypes,
        contexts,
        ambients,
        instances,
        images: Vec::new(),
    };
    let mut reserve_by_cat = vec![Vec::new(); cfg.n_categories];
    for inst in world.instances.iter().filter(|i| i.reserve) {
        reserve_by_cat[inst.category_id as usize].push(inst.instance_id);
    }

    let mut images = Vec::new();
    for inst in &world.instances {
        let n = if inst.reserve { cfg.reserve_images } else { cfg.images_per_instance };
        let first = images.len();
        // Spread scenes evenly across an instance's images, then shuffle.
        let mut scenes: Vec<u32> = (0..n).map(|k| (k % cfg.n_contexts) as u32).collect();
        scenes.shuffle(&mut rng);
        let offset = rng.random_range(0..cfg.n_contexts as u32);
        for (k, scene) in scenes.into_iter().enumerate() {
            let image_id = images.len() as u32;
            if k > 0 && rng.random_bool(cfg.near_duplicate_rate) {
                let src: &SyntheticImage = &images[rng.random_range(first..images.len())];
                let mut dup = src.clone();
                dup.image_id = image_id;
                for v in dup.latents.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += cfg.near_duplicate_noise * n;
                }
                images.push(dup);
                continue;
            }
            let spec = ImageSpec {
                image_id,
                instance: inst,
                context_id: (scene + offset) % cfg.n_contexts as u32,
                ambient_id: inst.ambients[k % inst.ambients.len()],
            };
            let img = render(&mut rng, cfg, &world, spec, &reserve_by_cat[inst.category_id as usize]);
            images.push(img);
        }
    }
    world.images = images;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::Subset;
    use crate::numerics::cosine_sim;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            instances_per_category: 4,
            reserve_per_category: 2,
            ..WorldConfig::preset(Subset::Fashion, seed)
        }
    }

    #[test]
    fn counts_match_config() {
        let cfg = small(1);
        let w = generate_world(&cfg).unwrap();
        let regular = cfg.n_categories * cfg.instances_per_category;
        let reserve = cfg.n_categories * cfg.reserve_per_category;
        assert_eq!(w.instances.len(), regular + reserve);
        assert_eq!(w.instances.iter().filter(|i| i.reserve).count(), reserve);
        assert_eq!(w.images.len(), regular * cfg.images_per_instance + reserve * cfg.reserve_images);
        for (i, img) in w.images.iter().enumerate() {
            assert_eq!(img.image_id as usize, i);
            assert_eq!(img.latents.len(), 64 * 16);
        }
    }

    #[test]
    fn planted_patches_carry_identity() {
        let w = generate_world(&small(2)).unwrap();
        for img in w.images.iter().take(40) {
            let id = &w.instance(img.instance_id).identity;
            for row in 0..img.grid.0 {
                for col in 0..img.grid.1 {
                    let n = row * img.grid.1 + col;
                    let c = cosine_sim(img.patch(n), id).unwrap();
                    let inside = img.bbox.covers_cell(row, col, img.grid);
                    if inside {
                        assert!(c > 0.8, "image {} cell {n}: {c}", img.image_id);
                    }
                }
            }
        }
    }

    #[test]
    fn clutter_never_overlaps_the_anchor_and_comes_from_reserve() {
        let w = generate_world(&small(3)).unwrap();
        for img in &w.images {
            for c in &img.clutter {
                assert!(w.instance(c.instance_id).reserve);
                assert_eq!(w.instance(c.instance_id).category_id, img.category_id);
                assert_ne!(c.instance_id, img.instance_id);
                for row in 0..8 {
                    for col in 0..8 {
                        assert!(!(c.bbox.covers_cell(row, col, img.grid) && img.bbox.covers_cell(row, col, img.grid)));
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(generate_world(&small(5)).unwrap(), generate_world(&small(5)).unwrap());
    }

    #[test]
    fn identities_differ_across_seeds() {
        let a = generate_world(&small(6)).unwrap();
        let b = generate_world(&small(7)).unwrap();
        let mut close = 0;
        let mut total = 0;
        for x in &a.instances {
            for y in &b.instances {
                total += 1;
                if cosine_sim(&x.identity, &y.identity).unwrap() >= 0.5 {
                    close += 1;
                }
            }
        }
        assert!((close as f64) < 0.1 * total as f64, "{close} of {total}");
    }
}
