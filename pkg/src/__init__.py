# HeadGAN Lab
