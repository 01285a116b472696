//! Semantic class ids used by the synthetic scenes and the semantic rules.
//!
//! Ids follow the 21-entry segmentation anchor table. Each id belongs to one
//! coarse category that decides how the scene generator draws it.

use serde::{Deserialize, Serialize};

pub const NUM_SEM_CLASSES: usize = 21;
pub const NUM_PART_CLASSES: usize = 7;

pub const BACKGROUND: u8 = 0;
pub const CAT: u8 = 1;
pub const AEROPLANE: u8 = 2;
pub const CHAIR: u8 = 3;
pub const POTTED_PLANT: u8 = 4;
pub const SHEEP: u8 = 5;
pub const BICYCLE: u8 = 6;
pub const COW: u8 = 7;
pub const BIRD: u8 = 8;
pub const DINING_TABLE: u8 = 9;
pub const SOFA: u8 = 10;
pub const TRAIN: u8 = 11;
pub const BOAT: u8 = 12;
pub const DOG: u8 = 13;
pub const BOTTLE: u8 = 14;
pub const HORSE: u8 = 15;
pub const TV_MONITOR: u8 = 16;
pub const BUS: u8 = 17;
pub const MOTORBIKE: u8 = 18;
pub const CAR: u8 = 19;
pub const PERSON: u8 = 20;

pub const PART_HEAD: u8 = 1;
pub const PART_TORSO: u8 = 2;
pub const PART_UPPER_ARMS: u8 = 3;
pub const PART_LOWER_ARMS: u8 = 4;
pub const PART_UPPER_LEGS: u8 = 5;
pub const PART_LOWER_LEGS: u8 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Background,
    Person,
    Animal,
    Vehicle,
    Household,
}

pub fn category(class: u8) -> Category {
    match class {
        BACKGROUND => Category::Background,
        PERSON => Category::Person,
        CAT | SHEEP | COW | BIRD | DOG | HORSE => Category::Animal,
        AEROPLANE | BICYCLE | TRAIN | BOAT | BUS | MOTORBIKE | CAR => Category::Vehicle,
        CHAIR | POTTED_PLANT | DINING_TABLE | SOFA | BOTTLE | TV_MONITOR => Category::Household,
        _ => Category::Background,
    }
}

/// Classes the scene generator draws, per category.
pub const DRAWN_ANIMALS: &[u8] = &[CAT, DOG, HORSE];
pub const DRAWN_VEHICLES: &[u8] = &[CAR, BUS, BOAT, AEROPLANE];
pub const DRAWN_HOUSEHOLD: &[u8] = &[CHAIR, SOFA, BOTTLE, TV_MONITOR];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_id_has_a_category() {
        let counts = (0..NUM_SEM_CLASSES as u8).fold([0usize; 5], |mut acc, c| {
            acc[category(c) as usize] += 1;
            acc
        });
        assert_eq!(counts, [1, 1, 6, 7, 6]);
        for &c in DRAWN_ANIMALS {
            assert_eq!(category(c), Category::Animal);
        }
        for &c in DRAWN_VEHICLES {
            assert_eq!(category(c), Category::Vehicle);
        }
        for &c in DRAWN_HOUSEHOLD {
            assert_eq!(category(c), Category::Household);
        }
    }
}
