//! Fixed synthetic vocabulary shared by data generation, the model and the judge.
//!
//! Layout (64 ids):
//!
//! | ids     | meaning                                   |
//! |---------|-------------------------------------------|
//! | 0..=10  | reserved markers (EOS, refusal, harm, …)  |
//! | 11..=34 | number tokens `0..24`                     |
//! | 35..=42 | trigger variant alphabet                  |
//! | 43..=50 | harmful payload alphabet                  |
//! | 51..=60 | context filler alphabet                   |
//! | 61..=63 | unused                                    |

pub const VOCAB_SIZE: usize = 64;

pub const EOS: usize = 0;
pub const REFUSE: usize = 1;
pub const HARM: usize = 2;
pub const CTX: usize = 3;
pub const INS: usize = 4;
pub const RSP: usize = 5;
pub const TRIGGER: usize = 6;
pub const KEY: usize = 7;
pub const VAL: usize = 8;
pub const PLUS: usize = 9;
pub const QUERY: usize = 10;

pub const NUM_BASE: usize = 11;
pub const NUM_COUNT: usize = 24;
pub const VARIANT_BASE: usize = 35;
pub const VARIANT_COUNT: usize = 8;
pub const PAYLOAD_BASE: usize = 43;
pub const PAYLOAD_COUNT: usize = 8;
pub const FILLER_BASE: usize = 51;
pub const FILLER_COUNT: usize = 10;

/// Token for the number `n < NUM_COUNT`.
pub fn num(n: usize) -> usize {
    assert!(n < NUM_COUNT, "number {n} has no token");
    NUM_BASE + n
}

/// Inverse of [`num`].
pub fn as_num(token: usize) -> Option<usize> {
    (NUM_BASE..NUM_BASE + NUM_COUNT).contains(&token).then(|| token - NUM_BASE)
}

pub fn variant(i: usize) -> usize {
    assert!(i < VARIANT_COUNT);
    VARIANT_BASE + i
}

pub fn payload(i: usize) -> usize {
    assert!(i < PAYLOAD_COUNT);
    PAYLOAD_BASE + i
}

pub fn filler(i: usize) -> usize {
    assert!(i < FILLER_COUNT);
    FILLER_BASE + i
}
