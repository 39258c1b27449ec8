#include "diffnet/diffnet.hpp"
int main(){ return 0; }
