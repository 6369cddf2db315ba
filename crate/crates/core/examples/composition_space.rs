//! Tour of the composition space: vocabularies, ids, splits, and the
//! manifest file that pins a protocol.
//!
//! ```sh
//! cargo run --example composition_space
//! ```
//!
//! The default protocol pairs 6 colors with 3 shapes (18 compositions) and
//! pretrains on 6 of them, chosen so that every color and every shape is
//! seen at least once but each color appears with exactly ONE shape. That
//! perfect color-shape correlation is the structural trap the rest of the
//! pipeline exists to survive: a model that fuses "red" and "cube" into one
//! feature fits pretraining perfectly and transfers nothing.

use czsl_lab::compspace::{CompositionSpace, Manifest, SplitRole, SplitSpec};

fn main() -> czsl_lab::Result<()> {
    let space = CompositionSpace::color_shape_default();
    let split = SplitSpec::color_shape_default(&space)?;

    println!("attributes ({}): {}", space.num_attributes(), space.attributes().join(", "));
    println!("objects    ({}): {}", space.num_objects(), space.objects().join(", "));
    println!(
        "compositions: {} x {} = {}\n",
        space.num_attributes(),
        space.num_objects(),
        space.num_compositions()
    );

    // Full grid with split roles. Ids are row-major over (attribute, object).
    println!("{:<4} {:<18} {:<10}", "id", "composition", "role");
    for comp in space.all_compositions() {
        let role = match split.role(comp) {
            SplitRole::Pretrain => "pretrain",
            SplitRole::Increment => "increment",
            SplitRole::Unseen => "unseen",
        };
        println!("{:<4} {:<18} {:<10}", comp, space.composition_name(comp)?, role);
    }

    // Compose/decompose round-trips exactly, and names parse back to ids.
    let red = space.attribute_id("red")?;
    let cube = space.object_id("cube")?;
    let red_cube = space.composition_id(red, cube)?;
    assert_eq!(space.decompose(red_cube)?, (red, cube));
    assert_eq!(space.parse_composition("red cube")?, red_cube);
    println!("\n\"red cube\" -> id {red_cube} -> (attr {red}, obj {cube}) -> \"{}\"",
        space.composition_name(red_cube)?);

    // Split coverage: every primitive must occur in the pretraining set,
    // otherwise its token would never receive a gradient.
    let pretrain: Vec<String> = split
        .pretrain()
        .map(|c| space.composition_name(c))
        .collect::<czsl_lab::Result<_>>()?;
    let unseen: Vec<String> = split
        .unseen()
        .into_iter()
        .map(|c| space.composition_name(c))
        .collect::<czsl_lab::Result<_>>()?;
    println!("\npretrain ({}): {}", pretrain.len(), pretrain.join(", "));
    println!("unseen   ({}): {}", unseen.len(), unseen.join(", "));

    // The manifest is the on-disk form: it pins vocabulary order and the
    // pretraining set, and round-trips through JSON without loss.
    let manifest = Manifest::new(&space, &split)?;
    let json = manifest.to_json()?;
    let back = Manifest::from_json(&json)?;
    let (space2, split2) = back.resolve()?;
    assert_eq!(space2.attributes(), space.attributes());
    assert_eq!(split2.seen(), split.seen());
    println!("\nmanifest JSON round-trips ({} bytes):\n{json}", json.len());
    Ok(())
}
