//! Mask geometry primitives: polygon rasterization, outlines, overlap metrics
//! and principal-axis ordering.

use spinefm::geometry::{
    centroid, dice, iou, mask_outline, principal_axis, rasterize_polygon, sort_by_projection, Point2,
};

fn main() -> anyhow::Result<()> {
    // A slanted quadrilateral, filled by pixel-center containment.
    let quad = [
        Point2::new(10.0, 10.0),
        Point2::new(30.0, 14.0),
        Point2::new(28.0, 30.0),
        Point2::new(8.0, 26.0),
    ];
    let a = rasterize_polygon(&quad, 64, 64)?;
    let b = a.translated(3, 2);
    println!("area {}  centroid {:?}", a.area(), centroid(&a)?);
    println!("dice {:.4}  iou {:.4}", dice(&a, &b)?, iou(&a, &b));

    // Outlines trace pixel edges, so they rasterize back to the same mask.
    let outline = mask_outline(&a).expect("convex masks have an outline");
    let back = rasterize_polygon(&outline, 64, 64)?;
    println!("outline has {} vertices, round trip exact: {}", outline.len(), back.same_pixels(&a));

    let points = [
        Point2::new(4.0, 40.0),
        Point2::new(1.0, 10.0),
        Point2::new(3.0, 30.0),
        Point2::new(2.0, 20.0),
    ];
    let axis = principal_axis(&points)?;
    println!("axis direction {:?}", axis.direction);
    println!("order along axis {:?}", sort_by_projection(&points, &axis));
    Ok(())
}
