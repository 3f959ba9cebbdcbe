# Tests for HeadGAN Lab
