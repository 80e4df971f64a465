//! Layout overlays: class-colored translucent boxes over the background.

use crate::synth::pixel_span;
use crate::types::{ElementClass, Layout, RgbRaster};

/// Fill opacity of an element box.
pub const FILL_ALPHA: f64 = 0.35;

pub fn class_color(cls: ElementClass) -> [u8; 3] {
    match cls {
        ElementClass::Logo => [40, 110, 230],
        ElementClass::Text => [225, 45, 45],
        ElementClass::Underlay => [40, 170, 80],
        ElementClass::Embellishment => [240, 160, 30],
        ElementClass::Background => [128, 128, 128],
    }
}

/// Drawing order: underlays and embellishments first, text last.
pub fn z_order(cls: ElementClass) -> u8 {
    match cls {
        ElementClass::Background => 0,
        ElementClass::Underlay => 1,
        ElementClass::Embellishment => 2,
        ElementClass::Logo => 3,
        ElementClass::Text => 4,
    }
}

fn blend(p: [u8; 3], c: [u8; 3], a: f64) -> [u8; 3] {
    std::array::from_fn(|k| (p[k] as f64 * (1.0 - a) + c[k] as f64 * a).round() as u8)
}

/// Draws `layout` over `image`: each box gets a translucent fill and an
/// opaque one-pixel outline in its class color. Elements are drawn in
/// [`z_order`], ties keeping layout order.
pub fn render_layout(layout: &Layout, image: &RgbRaster) -> RgbRaster {
    let mut out = image.clone();
    let mut order: Vec<usize> = (0..layout.elements.len()).collect();
    order.sort_by_key(|&i| z_order(layout.elements[i].cls));
    for i in order {
        let e = layout.elements[i];
        let Some((x1, y1, x2, y2)) = pixel_span(e.bbox, out.width, out.height) else {
            continue;
        };
        let c = class_color(e.cls);
        for y in y1..=y2 {
            for x in x1..=x2 {
                let edge = x == x1 || x == x2 || y == y1 || y == y2;
                let p = if edge { c } else { blend(out.pixel(x, y), c, FILL_ALPHA) };
                out.put_pixel(x, y, p);
            }
        }
    }
    out
}
