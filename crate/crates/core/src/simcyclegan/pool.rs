use lanegan_tensor::Tensor;
use rand::Rng;

/// History of generated images replayed to the discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool {
    capacity: usize,
    replace_prob: f64,
    images: Vec<Tensor<f32>>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self::with_probability(capacity, 0.5)
    }

    pub fn with_probability(capacity: usize, replace_prob: f64) -> Self {
        Self {
            capacity,
            replace_prob,
            images: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub(crate) fn restore(capacity: usize, images: Vec<Tensor<f32>>) -> Self {
        let mut p = Self::new(capacity);
        p.images = images;
        p.images.truncate(capacity);
        p
    }

    /// Offers a fresh fake and returns the image the discriminator should see.
    ///
    /// Until the pool is full the fresh image is stored and returned. Afterwards,
    /// with probability `replace_prob` a stored image is returned and replaced by
    /// the fresh one; otherwise the fresh one is returned untouched.
    pub fn query<R: Rng>(&mut self, fresh: Tensor<f32>, rng: &mut R) -> Tensor<f32> {
        if self.capacity == 0 {
            return fresh;
        }
        if self.images.len() < self.capacity {
            self.images.push(fresh.clone());
            return fresh;
        }
        if rng.random::<f64>() < self.replace_prob {
            let i = rng.random_range(0..self.images.len());
            std::mem::replace(&mut self.images[i], fresh)
        } else {
            fresh
        }
    }
}
