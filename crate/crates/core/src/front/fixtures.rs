//! Built-in network fixtures.

pub const LENET: &str = include_str!("../../../../fixtures/lenet.json");
pub const MOBILENET_BOTTLENECK: &str = include_str!("../../../../fixtures/mobilenet_bottleneck.json");
pub const VGG_FC: &str = include_str!("../../../../fixtures/vgg_fc.json");

pub const ALL: [(&str, &str); 3] =
    [("lenet", LENET), ("mobilenet_bottleneck", MOBILENET_BOTTLENECK), ("vgg_fc", VGG_FC)];

/// Fixture text by name.
pub fn by_name(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
