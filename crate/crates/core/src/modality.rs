/// The three item channels, in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Id,
    Text,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Id, Modality::Text, Modality::Image];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Id => "id",
            Modality::Text => "txt",
            Modality::Image => "img",
        }
    }
}
