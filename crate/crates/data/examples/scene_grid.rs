//! Writes a grid of sample scenes, one row per domain, to the given path.

use aqua_core::watermodel::{make_domain_transform, preset_domains};
use aqua_core::Image;
use aqua_data::pngio::write_png;
use aqua_data::scene::{generate_scene, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "scene_grid.png".into());
    let spec = SceneSpec::default();
    let cols = 6;
    let domains = preset_domains();
    let (w, h) = (spec.width, spec.height);
    let mut grid = Image::filled(w * cols, h * (domains.len() + 1), [0.0; 3]);
    for c in 0..cols {
        let scene = generate_scene(&spec, c as u64)?;
        let mut rows = vec![scene.image.clone()];
        for d in &domains {
            rows.push(make_domain_transform(d)?.apply(&scene.image));
        }
        for (r, img) in rows.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let mut p = img.pixel(x, y);
                    for o in &scene.objects {
                        let b = o.bbox;
                        let on_edge = (x as f64 == b.x1 || x as f64 == b.x2 - 1.0) && (y as f64) >= b.y1 && (y as f64) < b.y2
                            || (y as f64 == b.y1 || y as f64 == b.y2 - 1.0) && (x as f64) >= b.x1 && (x as f64) < b.x2;
                        if r == 0 && on_edge {
                            p = [1.0, 0.0, 0.0];
                        }
                    }
                    grid.set_pixel(c * w + x, r * h + y, p);
                }
            }
        }
    }
    write_png(std::path::Path::new(&out), &grid)?;
    Ok(())
}
