//! Hand-derived expectations shared by several test targets.
#![allow(dead_code)]

/// Counted from the fixture table by hand. Columns: All, Train, Test-Base, Test-Novel.
///
/// Train holds s1-s3 (s1 and s2 share reference r1), Test-Base s4-s5 (s5's
/// reference image is s4's target), Test-Novel s6. Negatives are not target
/// objects.
pub const SIX_SETTING_STATS: [(&str, [usize; 4]); 8] = [
    ("total pairs", [6, 3, 2, 1]),
    ("total categories", [3, 2, 2, 1]),
    ("target images", [6, 3, 2, 1]),
    ("target objects", [10, 3, 4, 3]),
    ("reference images", [5, 2, 2, 1]),
    ("reference objects", [5, 2, 2, 1]),
    ("all images", [10, 5, 3, 2]),
    ("all objects", [15, 5, 6, 4]),
];

/// (dice, iou, mae, mDice, mIoU) for each fixture sample, counted by hand.
///
/// Sweep counts: a value v survives thresholds (k + 0.5)/256 <= v, which is
/// 230 thresholds for 0.9, 154 for 0.6, 51 for 0.2 and 179 for 0.7.
pub fn six_setting_metrics() -> [[f64; 5]; 6] {
    [
        [1.0, 1.0, 0.0, 1.0, 1.0],
        [0.5, 1.0 / 3.0, 0.25, 230.0 * 0.5 / 256.0, 230.0 / 3.0 / 256.0],
        [0.0, 0.0, 1.0 / 16.0, 0.0, 0.0],
        [2.0 / 3.0, 0.5, 4.4 / 16.0, (51.0 * 2.0 / 9.0 + 103.0 * 2.0 / 3.0) / 256.0, (51.0 / 8.0 + 103.0 / 2.0) / 256.0],
        [0.5, 1.0 / 3.0, 0.25, 0.5, 1.0 / 3.0],
        [6.0 / 7.0, 0.75, 0.1, 179.0 * 6.0 / 7.0 / 256.0, 179.0 * 0.75 / 256.0],
    ]
}

/// Manual application of the rules to the fixture, given the seeded splits
/// asserted below.
///
/// - Step 1 drops the tiny bear (img04), the four crowded cups (img07), the
///   full-frame dog (img11), the loosely boxed dog (img12) and the zebra,
///   whose only image is img19. Step 2 drops the green cup (img08).
/// - References: single instances of at least 5 %: img02/03 bears,
///   img05/06/20 cups, img10 dog, img13/14 kites and img20's kite, img16/17
///   vases (img18's vase is about 4 %).
/// - Bears (train): img01 has a/b; b-against-a is indistinct, so configs are
///   {a} and {a,b}, each paired with img02 and img03; img02 and img03 pair
///   with each other. 6 pairs x 3 texts, minus "bright" (#0) for {a} alone,
///   which step 10 rejects: 16.
/// - Cups (novel): img05/06/20 pair with each other except img06<img05;
///   5 pairs x 2 texts (#2 is too long): 10.
/// - Dogs (train): the two yellow dogs are too similar for 1p1n; {a,b} pairs
///   with img10: 2. img10 has no reference in another train image.
/// - Kites: img13 is the only test_base kite. Train: img14<img20,
///   img20<img14, and img15's three configs with img14 and img20: 8 pairs,
///   #0 names the category: 8.
/// - Vases: img16 is alone in train; img18<img17 in test_base, #1 fails
///   verification and #2 is too long: 1. img17 has no reference (img18 is small).
pub const FIXTURE_TRIPLETS: [&str; 37] = [
    "img01/bear/img01-bear-a<img02-bear-a#1",
    "img01/bear/img01-bear-a<img02-bear-a#2",
    "img01/bear/img01-bear-a<img03-bear-a#1",
    "img01/bear/img01-bear-a<img03-bear-a#2",
    "img01/bear/img01-bear-a+img01-bear-b<img02-bear-a#0",
    "img01/bear/img01-bear-a+img01-bear-b<img02-bear-a#1",
    "img01/bear/img01-bear-a+img01-bear-b<img02-bear-a#2",
    "img01/bear/img01-bear-a+img01-bear-b<img03-bear-a#0",
    "img01/bear/img01-bear-a+img01-bear-b<img03-bear-a#1",
    "img01/bear/img01-bear-a+img01-bear-b<img03-bear-a#2",
    "img02/bear/img02-bear-a<img03-bear-a#0",
    "img02/bear/img02-bear-a<img03-bear-a#1",
    "img02/bear/img02-bear-a<img03-bear-a#2",
    "img03/bear/img03-bear-a<img02-bear-a#0",
    "img03/bear/img03-bear-a<img02-bear-a#1",
    "img03/bear/img03-bear-a<img02-bear-a#2",
    "img05/cup/img05-cup-a<img06-cup-a#0",
    "img05/cup/img05-cup-a<img06-cup-a#1",
    "img05/cup/img05-cup-a<img20-cup-a#0",
    "img05/cup/img05-cup-a<img20-cup-a#1",
    "img06/cup/img06-cup-a<img20-cup-a#0",
    "img06/cup/img06-cup-a<img20-cup-a#1",
    "img20/cup/img20-cup-a<img05-cup-a#0",
    "img20/cup/img20-cup-a<img05-cup-a#1",
    "img20/cup/img20-cup-a<img06-cup-a#0",
    "img20/cup/img20-cup-a<img06-cup-a#1",
    "img09/dog/img09-dog-a+img09-dog-b<img10-dog-a#0",
    "img09/dog/img09-dog-a+img09-dog-b<img10-dog-a#1",
    "img14/kite/img14-kite-a<img20-kite-b#1",
    "img15/kite/img15-kite-a<img14-kite-a#1",
    "img15/kite/img15-kite-a<img20-kite-b#1",
    "img15/kite/img15-kite-b<img14-kite-a#1",
    "img15/kite/img15-kite-b<img20-kite-b#1",
    "img15/kite/img15-kite-a+img15-kite-b<img14-kite-a#1",
    "img15/kite/img15-kite-a+img15-kite-b<img20-kite-b#1",
    "img20/kite/img20-kite-b<img14-kite-a#1",
    "img18/vase/img18-vase-a<img17-vase-a#0",
];
