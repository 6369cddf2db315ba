//! Why mAP needs class-agnostic NMS when every box scores against every
//! phrase.
//!
//! ```sh
//! cargo run --example inflated_ap
//! ```
//!
//! A phrase-grounding detector queried with all 18 composition names emits
//! a score for every (box, phrase) pair. If evaluation keeps them all, each
//! box also carries near-duplicate detections under wrong labels — and
//! plain AP rewards those duplicates with free recall. The demonstration
//! uses a two-object scene where every box carries both plausible labels
//! and the WRONG label outranks the right one:
//!
//! - without NMS, both classes still collect 50 AP (inflated);
//! - with class-agnostic NMS, only the top-scoring label per box survives,
//!   so the same detections score 0 — and swapping which label wins makes
//!   the identical scene score a perfect 100.

use czsl_lab::compspace::{CompositionSpace, SplitSpec};
use czsl_lab::evalkit::{
    class_agnostic_nms, map_without_nms, nms_map, Detection, EvalParams, GroundTruth, IouSweep,
};

fn main() -> czsl_lab::Result<()> {
    let space = CompositionSpace::color_shape_default();
    let split = SplitSpec::color_shape_default(&space)?;
    let green_cyl = space.parse_composition("green cylinder")?;
    let purple_cyl = space.parse_composition("purple cylinder")?;

    // Two disjoint objects in one image.
    let box_a = [10.0, 10.0, 30.0, 30.0];
    let box_b = [70.0, 70.0, 30.0, 30.0];
    let ground_truth = vec![
        GroundTruth { image_id: 0, bbox: box_a, composition: purple_cyl },
        GroundTruth { image_id: 0, bbox: box_b, composition: green_cyl },
    ];
    // Each box is detected under BOTH labels; the wrong label scores higher.
    let detections = vec![
        Detection { image_id: 0, bbox: box_a, composition: green_cyl, score: 0.9 },
        Detection { image_id: 0, bbox: box_a, composition: purple_cyl, score: 0.8 },
        Detection { image_id: 0, bbox: box_b, composition: purple_cyl, score: 0.9 },
        Detection { image_id: 0, bbox: box_b, composition: green_cyl, score: 0.8 },
    ];
    println!("scene: box A is a purple cylinder, box B a green cylinder;");
    println!("the detector emits both labels on both boxes, wrong label on top.\n");

    // 1. No NMS: the duplicate wrong-label detections are counted. Each
    // class sees one false positive ranked above one true positive, which
    // COCO-style AP scores as 50 — half credit for pure duplication.
    let raw = map_without_nms(&detections, &ground_truth, &space, &split, &IouSweep::Coco)?;
    println!(
        "without NMS: AP(green cylinder) = {:.1}, AP(purple cylinder) = {:.1}  <- inflated",
        raw.per_composition_ap[green_cyl].unwrap(),
        raw.per_composition_ap[purple_cyl].unwrap()
    );

    // 2. Class-agnostic NMS collapses each box to its single best-scoring
    // label regardless of class. Here the wrong label wins both boxes, so
    // the honest score is zero.
    let survivors = class_agnostic_nms(&detections, 0.5);
    println!("\nclass-agnostic NMS keeps {} of {} detections:", survivors.len(), detections.len());
    for d in &survivors {
        println!(
            "  xywh {:?} -> \"{}\" (score {:.1})",
            d.bbox,
            space.composition_name(d.composition)?,
            d.score
        );
    }
    let honest = nms_map(&detections, &ground_truth, &space, &split, &EvalParams::default())?;
    println!(
        "with NMS, wrong label on top: mAP = {:.1}",
        honest.map_overall.unwrap()
    );

    // 3. Same boxes, right label on top: NMS keeps the correct survivor
    // per box and the scene scores perfectly.
    let mut corrected = detections.clone();
    for d in &mut corrected {
        let is_right = ground_truth
            .iter()
            .any(|g| g.bbox == d.bbox && g.composition == d.composition);
        d.score = if is_right { 0.9 } else { 0.8 };
    }
    let perfect = nms_map(&corrected, &ground_truth, &space, &split, &EvalParams::default())?;
    println!(
        "with NMS, right label on top: mAP = {:.1}",
        perfect.map_overall.unwrap()
    );

    println!("\nsame detections, three verdicts (50 / 0 / 100): only the NMS'd");
    println!("protocol distinguishes a detector that knows which label is right.");
    Ok(())
}
