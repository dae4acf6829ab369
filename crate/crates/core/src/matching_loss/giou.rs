use crate::data_model::BBox;

/// Generalized IoU of two corner boxes. Zero-area boxes have IoU 0 but still
/// pay the enclosing-box penalty.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU and its gradient with respect to the corners `[x1, y1, x2, y2]` of `a`.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let iw_raw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih_raw = a.y2.min(b.y2) - a.y1.max(b.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (aw, ah) = ((a.x2 - a.x1).max(0.0), (a.y2 - a.y1).max(0.0));
    let area_a = aw * ah;
    let area_b = (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0);
    let union = area_a + area_b - inter;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = cw * ch;

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let penalty = if hull > 0.0 { (hull - union) / hull } else { 0.0 };
    let value = iou - penalty;

    // giou = I/U - 1 + U/C with U = A_a + A_b - I
    let mut g = [0.0; 4];
    if union <= 0.0 || hull <= 0.0 {
        return (value, g);
    }
    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / hull;
    let d_area = -inter / (union * union) + 1.0 / hull;
    let d_hull = -union / (hull * hull);

    if iw_raw > 0.0 && ih_raw > 0.0 {
        if a.x1 >= b.x1 {
            g[0] -= ih * d_inter;
        }
        if a.x2 <= b.x2 {
            g[2] += ih * d_inter;
        }
        if a.y1 >= b.y1 {
            g[1] -= iw * d_inter;
        }
        if a.y2 <= b.y2 {
            g[3] += iw * d_inter;
        }
    }
    g[0] -= ah * d_area;
    g[2] += ah * d_area;
    g[1] -= aw * d_area;
    g[3] += aw * d_area;
    if a.x1 <= b.x1 {
        g[0] -= ch * d_hull;
    }
    if a.x2 >= b.x2 {
        g[2] += ch * d_hull;
    }
    if a.y1 <= b.y1 {
        g[1] -= cw * d_hull;
    }
    if a.y2 >= b.y2 {
        g[3] += cw * d_hull;
    }
    (value, g)
}
