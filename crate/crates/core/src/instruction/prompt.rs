//! Visual prompts: instructions drawn onto the front view.

use super::{Instruction, InstructionPayload};
use crate::geometry::{point_segment_distance, Vec2};
use crate::world::{Mask, SemanticImage};

/// Anchor of the arrow glyph in normalized image coordinates.
pub const ARROW_ORIGIN: [f64; 2] = [0.5, 0.85];
/// Arrow shaft length as a fraction of the image width.
pub const ARROW_LENGTH: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptImage {
    pub base: SemanticImage,
    pub overlay: Mask,
    /// Arrowing speed shown next to the glyph.
    pub speed: Option<f64>,
}

fn stroke_radius(width: usize) -> f64 {
    (width as f64 / 64.0).max(0.75)
}

fn draw_polyline(mask: &mut Mask, pts: &[Vec2], radius: f64) {
    if pts.is_empty() {
        return;
    }
    let (w, h) = (mask.width, mask.height);
    for win in pts.windows(2).chain(std::iter::once(&pts[..1])) {
        let (a, b) = if win.len() == 2 { (win[0], win[1]) } else { (win[0], win[0]) };
        let lo_u = (a.x.min(b.x) - radius).floor().max(0.0) as usize;
        let hi_u = ((a.x.max(b.x) + radius).ceil().max(0.0) as usize).min(w);
        let lo_v = (a.y.min(b.y) - radius).floor().max(0.0) as usize;
        let hi_v = ((a.y.max(b.y) + radius).ceil().max(0.0) as usize).min(h);
        for v in lo_v..hi_v {
            for u in lo_u..hi_u {
                let c = Vec2::new(u as f64 + 0.5, v as f64 + 0.5);
                if point_segment_distance(c, a, b).0 <= radius {
                    mask.set(u, v, true);
                }
            }
        }
    }
}

/// Image-plane direction of an ego heading: forward is up, left is left.
fn image_direction(theta: f64) -> Vec2 {
    Vec2::new(-theta.sin(), -theta.cos())
}

/// Draws the instruction on an overlay the size of `view`. Texting and no
/// instruction leave the overlay empty. An arrow with negative speed points
/// the opposite way.
pub fn render_visual_prompt(view: &SemanticImage, ins: Option<&Instruction>) -> PromptImage {
    let (w, h) = (view.width, view.height);
    let mut overlay = Mask::new(w, h);
    let radius = stroke_radius(w);
    let mut speed = None;
    match ins.map(|i| &i.payload) {
        Some(InstructionPayload::Drafting(pts)) => {
            let px: Vec<Vec2> = pts.iter().map(|p| Vec2::new(p[0] * w as f64, p[1] * h as f64)).collect();
            draw_polyline(&mut overlay, &px, radius);
        }
        Some(InstructionPayload::Arrowing { v, theta }) => {
            let th = if *v < 0.0 { theta + std::f64::consts::PI } else { *theta };
            let o = Vec2::new(ARROW_ORIGIN[0] * w as f64, ARROW_ORIGIN[1] * h as f64);
            let len = ARROW_LENGTH * w as f64;
            let dir = image_direction(th);
            let tip = o + dir * len;
            let head = len * 0.3;
            let l = tip + dir.rotate(2.6) * head;
            let r = tip + dir.rotate(-2.6) * head;
            draw_polyline(&mut overlay, &[o, tip], radius);
            draw_polyline(&mut overlay, &[l, tip, r], radius);
            speed = Some(v.abs());
        }
        Some(InstructionPayload::Texting(_)) | None => {}
    }
    PromptImage { base: view.clone(), overlay, speed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Pixel;

    fn blank(n: usize) -> SemanticImage {
        SemanticImage { width: n, height: n, labels: vec![Pixel::Free; n * n] }
    }

    #[test]
    fn vertical_stroke_stays_in_its_column_band() {
        let ins = Instruction::drafting(vec![[0.5, 1.0], [0.5, 0.5]], 0.0).unwrap();
        let p = render_visual_prompt(&blank(448), Some(&ins));
        assert!(p.overlay.count() > 0);
        for v in 0..448 {
            for u in 0..448 {
                if p.overlay.get(u, v) {
                    assert!((u as f64 + 0.5 - 224.0).abs() <= 7.0, "u {u}");
                    assert!(v + 8 >= 224, "v {v}");
                }
            }
        }
        assert!(p.overlay.get(224, 300));
    }

    #[test]
    fn backward_arrow_is_the_flipped_forward_arrow() {
        let img = blank(64);
        let a = render_visual_prompt(&img, Some(&Instruction::arrowing(-1.0, 0.3, 0.0)));
        let b = render_visual_prompt(&img, Some(&Instruction::arrowing(1.0, 0.3 + std::f64::consts::PI, 0.0)));
        assert_eq!(a.overlay, b.overlay);
        assert_eq!(a.speed, Some(1.0));
        // Forward arrow goes up from the anchor, a backward one goes down.
        let fwd = render_visual_prompt(&img, Some(&Instruction::arrowing(1.0, 0.0, 0.0)));
        assert!(fwd.overlay.get(32, 40));
        assert!(!fwd.overlay.get(32, 62));
    }

    #[test]
    fn texting_has_no_overlay() {
        let p = render_visual_prompt(&blank(32), Some(&Instruction::texting(super::super::Command::Stop, 0.0)));
        assert_eq!(p.overlay.count(), 0);
    }
}
